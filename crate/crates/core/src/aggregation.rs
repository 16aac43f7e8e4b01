//! Cluster-wise aggregation of task models and temporal combination rules.
//!
//! Parameters are handled as flat vectors (see `TaskModelParams::vectorize`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `Σ (m_k / Σm) θ_k` over the members.
pub fn cluster_weighted_average(members: &[(&[f64], f64)]) -> Result<Vec<f64>> {
    let (first, _) = members
        .first()
        .ok_or_else(|| Error::Empty("cluster members".into()))?;
    let total: f64 = members.iter().map(|(_, m)| *m).sum();
    if members.iter().any(|(_, m)| *m < 0.0) || !(total > 0.0) {
        return Err(Error::Config(
            "member weights must be >= 0 with positive sum".into(),
        ));
    }
    // incremental weighted mean: identical members reproduce their value exactly
    let mut out = first.to_vec();
    let mut seen = 0.0;
    for (theta, m) in members {
        if theta.len() != out.len() {
            return Err(Error::shape(out.len(), theta.len()));
        }
        seen += m;
        if *m > 0.0 {
            for (o, x) in out.iter_mut().zip(theta.iter()) {
                *o += (x - *o) * (m / seen);
            }
        }
    }
    Ok(out)
}

/// Running mean: `(t/(t+1)) θ̂ + (1/(t+1)) θ`.
pub fn a1_update(hat: &[f64], theta: &[f64], t: usize) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::Config("A1 round counter must be >= 1".into()));
    }
    if hat.len() != theta.len() {
        return Err(Error::shape(hat.len(), theta.len()));
    }
    let n = t as f64;
    Ok(hat
        .iter()
        .zip(theta)
        .map(|(h, x)| h + (x - h) / (n + 1.0))
        .collect())
}

/// Exponential forgetting: `a θ̂ + (1 − a) θ`.
pub fn a2_update(hat: &[f64], theta: &[f64], a: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Config(format!(
            "forgetting factor {a} outside [0, 1]"
        )));
    }
    if hat.len() != theta.len() {
        return Err(Error::shape(hat.len(), theta.len()));
    }
    Ok(hat
        .iter()
        .zip(theta)
        .map(|(h, x)| a * h + (1.0 - a) * x)
        .collect())
}

/// Per current cluster: fire when `t ≥ t_task`, when there is no previous
/// round, or when the exact member set also formed a cluster last round.
///
/// Member lists must be sorted.
pub fn broadcast_rule(
    current: &[Vec<usize>],
    previous: Option<&[Vec<usize>]>,
    t: usize,
    t_task: usize,
) -> Vec<bool> {
    current
        .iter()
        .map(|members| match previous {
            _ if t >= t_task => true,
            None => true,
            Some(prev) => prev.iter().any(|p| p == members),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemporalRule {
    /// Broadcast the round estimate every round.
    Memoryless,
    /// Running mean, gated by the broadcast rule.
    A1,
    /// Forgetting-factor blend, gated by the broadcast rule.
    A2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTrack {
    pub members: Vec<usize>,
    /// Latest round estimate.
    pub current: Option<Vec<f64>>,
    /// Temporal estimate.
    pub hat: Option<Vec<f64>>,
    /// Rounds in which this track's temporal estimate was updated.
    pub count: usize,
}

/// Temporal state of every cluster, carried across rounds by member overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModelState {
    pub rule: TemporalRule,
    pub tracks: Vec<ClusterTrack>,
}

/// Greedy matching of current clusters to previous ones by largest overlap;
/// ties go to the lowest `(current, previous)` pair.
pub fn match_clusters(current: &[Vec<usize>], previous: &[Vec<usize>]) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (c, cm) in current.iter().enumerate() {
        for (p, pm) in previous.iter().enumerate() {
            let overlap = cm.iter().filter(|i| pm.binary_search(i).is_ok()).count();
            if overlap > 0 {
                pairs.push((overlap, c, p));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; current.len()];
    let mut used = vec![false; previous.len()];
    for (_, c, p) in pairs {
        if out[c].is_none() && !used[p] {
            out[c] = Some(p);
            used[p] = true;
        }
    }
    out
}

impl ClusterModelState {
    pub fn new(rule: TemporalRule) -> Self {
        Self {
            rule,
            tracks: Vec::new(),
        }
    }

    /// Advances one round.
    ///
    /// `clusters` are sorted member lists; `round_models[c]` is the round
    /// estimate for cluster `c`, or `None` if none of its members uploaded.
    /// Returns the model broadcast to each cluster's members, if any.
    pub fn advance(
        &mut self,
        clusters: &[Vec<usize>],
        round_models: &[Option<Vec<f64>>],
        a_t: f64,
        t: usize,
        t_task: usize,
    ) -> Result<Vec<Option<Vec<f64>>>> {
        if clusters.len() != round_models.len() {
            return Err(Error::shape(clusters.len(), round_models.len()));
        }
        let previous: Vec<Vec<usize>> = self.tracks.iter().map(|tr| tr.members.clone()).collect();
        let fire = broadcast_rule(
            clusters,
            if self.tracks.is_empty() {
                None
            } else {
                Some(&previous)
            },
            t,
            t_task,
        );
        let matched = match_clusters(clusters, &previous);
        let mut next = Vec::with_capacity(clusters.len());
        let mut out = Vec::with_capacity(clusters.len());
        for (c, members) in clusters.iter().enumerate() {
            let mut track = match matched[c] {
                Some(p) => self.tracks[p].clone(),
                None => ClusterTrack {
                    members: Vec::new(),
                    current: None,
                    hat: None,
                    count: 0,
                },
            };
            track.members = members.clone();
            let mut sent = None;
            if let Some(theta) = &round_models[c] {
                track.current = Some(theta.clone());
                match self.rule {
                    TemporalRule::Memoryless => sent = Some(theta.clone()),
                    TemporalRule::A1 | TemporalRule::A2 if fire[c] => {
                        let hat = match (&track.hat, self.rule) {
                            (None, _) => theta.clone(),
                            (Some(h), TemporalRule::A1) => a1_update(h, theta, track.count)?,
                            (Some(h), _) => a2_update(h, theta, a_t)?,
                        };
                        track.count += 1;
                        track.hat = Some(hat.clone());
                        sent = Some(hat);
                    }
                    _ => {}
                }
            }
            out.push(sent);
            next.push(track);
        }
        self.tracks = next;
        Ok(out)
    }

    /// Best available model for cluster `c`: temporal estimate, else round estimate.
    pub fn model_for(&self, c: usize) -> Option<&Vec<f64>> {
        let tr = self.tracks.get(c)?;
        tr.hat.as_ref().or(tr.current.as_ref())
    }
}
