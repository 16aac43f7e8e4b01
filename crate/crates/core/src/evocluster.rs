//! Evolutionary clustering of clients from their task-model weights.
//!
//! Each round the server forms a cosine-similarity matrix `W_t`, blends it
//! with the smoothed history `ψ̂_{t−1}` using an adaptively estimated
//! forgetting factor, and clusters the result with average-linkage
//! agglomerative clustering.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, sq_dist, Mat};

/// Client → cluster labels in `0..num_clusters`, numbered by smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub num_clusters: usize,
}

impl ClusterAssignment {
    /// Relabels arbitrary ids so clusters are numbered in order of first appearance.
    pub fn from_labels(raw: &[usize]) -> Self {
        let mut map: Vec<(usize, usize)> = Vec::new();
        let labels = raw
            .iter()
            .map(|&r| match map.iter().find(|(k, _)| *k == r) {
                Some(&(_, v)) => v,
                None => {
                    map.push((r, map.len()));
                    map.len() - 1
                }
            })
            .collect();
        Self {
            labels,
            num_clusters: map.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Member lists per cluster, each sorted ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, &c) in self.labels.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

/// Smoothed similarity with its history of forgetting factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityState {
    pub psi: Mat,
    pub w_last: Option<Mat>,
    pub a_history: Vec<f64>,
}

impl SimilarityState {
    /// `ψ̂₀ = 0`.
    pub fn new(k: usize) -> Self {
        Self {
            psi: Mat::zeros(k, k),
            w_last: None,
            a_history: Vec::new(),
        }
    }

    /// Runs one AFFECT round and stores the result.
    pub fn step(
        &mut self,
        w: &Mat,
        c: usize,
        max_iters: usize,
    ) -> Result<(f64, ClusterAssignment)> {
        let (psi, a, assignment) = affect_iterate(&self.psi, w, c, max_iters)?;
        self.psi = psi;
        self.w_last = Some(w.clone());
        self.a_history.push(a);
        Ok((a, assignment))
    }
}

/// Pairwise cosine similarities with unit diagonal.
pub fn similarity_matrix(vectors: &[Vec<f64>]) -> Result<Mat> {
    let k = vectors.len();
    if k == 0 {
        return Err(Error::Empty("similarity inputs".into()));
    }
    let mut w = Mat::identity(k);
    for i in 0..k {
        for j in i + 1..k {
            let s = cosine_similarity(&vectors[i], &vectors[j])?;
            w[(i, j)] = s;
            w[(j, i)] = s;
        }
    }
    if k == 1 {
        // still validate the lone vector
        cosine_similarity(&vectors[0], &vectors[0])?;
    }
    Ok(w)
}

/// `a·ψ̂_prev + (1−a)·W`.
pub fn smooth(prev: &Mat, w: &Mat, a: f64) -> Result<Mat> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Config(format!(
            "forgetting factor {a} outside [0, 1]"
        )));
    }
    if prev.shape() != w.shape() {
        return Err(Error::shape(
            format!("{:?}", prev.shape()),
            format!("{:?}", w.shape()),
        ));
    }
    let mut out = w.clone();
    out.scale(1.0 - a);
    out.add_scaled(a, prev)?;
    Ok(out)
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    // shifted by the first value so a constant set gives exactly (v, 0)
    let n = values.len() as f64;
    let x0 = values[0];
    let (s, sq) = values.iter().fold((0.0, 0.0), |(s, sq), v| {
        (s + (v - x0), sq + (v - x0).powi(2))
    });
    let mean = x0 + s / n;
    let var = if values.len() < 2 {
        0.0
    } else {
        ((sq - s * s / n) / (n - 1.0)).max(0.0)
    };
    (mean, var)
}

/// Block-wise mean and sample variance of `W` under `assignment`.
///
/// Intra-cluster blocks use each unordered off-diagonal pair once; a singleton's intra
/// block is `Ê = 1, Var̂ = 0`. Diagonals are `Ê = 1, Var̂ = 0`.
pub fn estimate_moments(w: &Mat, assignment: &ClusterAssignment) -> Result<(Mat, Mat)> {
    let k = w.rows();
    if w.cols() != k || assignment.len() != k {
        return Err(Error::shape(k, assignment.len()));
    }
    let members = assignment.members();
    let nc = members.len();
    let mut block_mean = Mat::zeros(nc, nc);
    let mut block_var = Mat::zeros(nc, nc);
    let mut buf = Vec::new();
    for c in 0..nc {
        for d in c..nc {
            buf.clear();
            if c == d {
                // each unordered pair is one observation
                let m = &members[c];
                for (x, &i) in m.iter().enumerate() {
                    for &j in &m[x + 1..] {
                        buf.push(0.5 * (w[(i, j)] + w[(j, i)]));
                    }
                }
            } else {
                for &i in &members[c] {
                    for &j in &members[d] {
                        buf.push(w[(i, j)]);
                    }
                }
            }
            let (m, v) = if buf.is_empty() {
                (1.0, 0.0)
            } else {
                mean_var(&buf)
            };
            block_mean[(c, d)] = m;
            block_mean[(d, c)] = m;
            block_var[(c, d)] = v;
            block_var[(d, c)] = v;
        }
    }
    let mut e = Mat::identity(k);
    let mut var = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let (c, d) = (assignment.labels[i], assignment.labels[j]);
                e[(i, j)] = block_mean[(c, d)];
                var[(i, j)] = block_var[(c, d)];
            }
        }
    }
    Ok((e, var))
}

/// Risk-minimizing forgetting factor
/// `Σ Var̂ / Σ ((ψ̂_prev − Ê)² + Var̂)` over off-diagonal entries, clamped to `[0, 1]`.
pub fn forgetting_factor(prev: &Mat, e: &Mat, var: &Mat) -> Result<f64> {
    if prev.shape() != e.shape() || prev.shape() != var.shape() {
        return Err(Error::shape(
            format!("{:?}", prev.shape()),
            format!("{:?}", e.shape()),
        ));
    }
    let k = prev.rows();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            if i != j {
                num += var[(i, j)];
                den += (prev[(i, j)] - e[(i, j)]).powi(2) + var[(i, j)];
            }
        }
    }
    if den <= 0.0 {
        return Ok(0.0);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Average-linkage agglomerative clustering on a similarity matrix.
///
/// Merges the pair with the highest mean cross similarity until `c` clusters
/// remain. A cluster's id is its smallest member, and ties go to the lowest
/// `(id, id)` pair.
pub fn agglomerative(sim: &Mat, c: usize) -> Result<ClusterAssignment> {
    let k = sim.rows();
    if sim.cols() != k {
        return Err(Error::shape(k, sim.cols()));
    }
    if c == 0 || c > k {
        return Err(Error::Config(format!("cluster count {c} outside [1, {k}]")));
    }
    // slot s always holds member s as its smallest element
    let mut active: Vec<bool> = vec![true; k];
    let mut size: Vec<usize> = vec![1; k];
    let mut owner: Vec<usize> = (0..k).collect();
    let mut sums = Mat::from_fn(k, k, |i, j| 0.5 * (sim[(i, j)] + sim[(j, i)]));
    let mut remaining = k;
    while remaining > c {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..k {
            if !active[a] {
                continue;
            }
            for b in a + 1..k {
                if !active[b] {
                    continue;
                }
                let avg = sums[(a, b)] / (size[a] * size[b]) as f64;
                if best.is_none_or(|(_, _, s)| avg > s) {
                    best = Some((a, b, avg));
                }
            }
        }
        let (a, b, _) = best.expect("at least two active clusters");
        for x in 0..k {
            let v = sums[(b, x)];
            sums[(a, x)] += v;
            let v = sums[(x, b)];
            sums[(x, a)] += v;
        }
        size[a] += size[b];
        active[b] = false;
        for o in owner.iter_mut() {
            if *o == b {
                *o = a;
            }
        }
        remaining -= 1;
    }
    Ok(ClusterAssignment::from_labels(&owner))
}

/// Iterative forgetting-factor estimation.
///
/// Starts from `â = 0` (pure `W`), then repeats cluster → moments → factor →
/// re-smooth `max_iters` times and clusters the final `ψ̂`.
pub fn affect_iterate(
    prev: &Mat,
    w: &Mat,
    c: usize,
    max_iters: usize,
) -> Result<(Mat, f64, ClusterAssignment)> {
    if max_iters == 0 {
        return Err(Error::Config("max_iters must be >= 1".into()));
    }
    let mut a = 0.0;
    let mut psi = smooth(prev, w, a)?;
    for _ in 0..max_iters {
        let assignment = agglomerative(&psi, c)?;
        let (e, var) = estimate_moments(w, &assignment)?;
        a = forgetting_factor(prev, &e, &var)?;
        psi = smooth(prev, w, a)?;
    }
    let assignment = agglomerative(&psi, c)?;
    Ok((psi, a, assignment))
}

/// Within-cluster sum of squared distances to each centroid.
pub fn wcss(vectors: &[Vec<f64>], assignment: &ClusterAssignment) -> f64 {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut total = 0.0;
    for members in assignment.members() {
        let mut centroid = vec![0.0; dim];
        for &i in &members {
            for (c, v) in centroid.iter_mut().zip(&vectors[i]) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= members.len() as f64);
        total += members
            .iter()
            .map(|&i| sq_dist(&vectors[i], &centroid))
            .sum::<f64>();
    }
    total
}

/// Mean silhouette on Euclidean distances; singletons score 0.
pub fn silhouette(vectors: &[Vec<f64>], assignment: &ClusterAssignment) -> f64 {
    let k = vectors.len();
    if k == 0 || assignment.num_clusters < 2 {
        return 0.0;
    }
    let members = assignment.members();
    let dist = |i: usize, j: usize| sq_dist(&vectors[i], &vectors[j]).sqrt();
    let mut total = 0.0;
    for i in 0..k {
        let own = assignment.labels[i];
        if members[own].len() < 2 {
            continue;
        }
        let a = members[own]
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| dist(i, j))
            .sum::<f64>()
            / (members[own].len() - 1) as f64;
        let b = members
            .iter()
            .enumerate()
            .filter(|(c, m)| *c != own && !m.is_empty())
            .map(|(_, m)| m.iter().map(|&j| dist(i, j)).sum::<f64>() / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / k as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCountEstimate {
    pub elbow: usize,
    pub silhouette: usize,
    /// `(C, WCSS, silhouette)` for each candidate.
    pub curves: Vec<(usize, f64, f64)>,
}

/// Elbow and silhouette choices over `c_range` (at least three consecutive values).
///
/// Assignments come from agglomerative clustering on cosine similarity; WCSS
/// and silhouette are measured on the raw vectors.
pub fn estimate_cluster_count(
    vectors: &[Vec<f64>],
    c_range: &[usize],
) -> Result<ClusterCountEstimate> {
    if c_range.len() < 3 {
        return Err(Error::Config(
            "cluster range needs at least three values".into(),
        ));
    }
    if c_range.windows(2).any(|p| p[1] != p[0] + 1) {
        return Err(Error::Config(
            "cluster range must be consecutive and increasing".into(),
        ));
    }
    let sim = similarity_matrix(vectors)?;
    let mut curves = Vec::with_capacity(c_range.len());
    for &c in c_range {
        let assignment = agglomerative(&sim, c)?;
        curves.push((
            c,
            wcss(vectors, &assignment),
            silhouette(vectors, &assignment),
        ));
    }
    let mut elbow = (c_range[1], f64::NEG_INFINITY);
    for i in 1..curves.len() - 1 {
        let d2 = curves[i - 1].1 - 2.0 * curves[i].1 + curves[i + 1].1;
        if d2 > elbow.1 {
            elbow = (curves[i].0, d2);
        }
    }
    let mut sil = (curves[0].0, f64::NEG_INFINITY);
    for &(c, _, s) in &curves {
        if s > sil.1 {
            sil = (c, s);
        }
    }
    Ok(ClusterCountEstimate {
        elbow: elbow.0,
        silhouette: sil.0,
        curves,
    })
}

/// Writes a matrix as CSV rows.
pub fn write_matrix_csv<W: Write>(m: &Mat, out: &mut W) -> Result<()> {
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
