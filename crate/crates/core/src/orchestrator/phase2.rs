//! Task-model rounds: local training, server-side clustering, temporal
//! aggregation and broadcast.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{cluster_weighted_average, ClusterModelState, TemporalRule};
use crate::baselines::{flsc_round, init_cluster_models};
use crate::datagen::{RoundEnv, World};
use crate::error::{Error, Result};
use crate::evocluster::{affect_iterate, agglomerative, similarity_matrix};
use crate::metrics::{cluster_avg_metric, rand_score, CommCounter, RoundLog};
use crate::numerics::{Mat, Purpose, RngStream};
use crate::taskmodel::{Dataset, TaskModelParams};

use super::config::{ExperimentConfig, Scheme};
use super::phase1::Phase1Output;

/// Participants of round `t`: `round(ratio · n_c)` clients (at least one)
/// drawn uniformly from each true cluster `c`. Sorted ascending.
pub fn sample_participants(
    seed: u64,
    true_cluster: &[usize],
    num_clusters: usize,
    ratio: f64,
    t: usize,
) -> Vec<usize> {
    if ratio >= 1.0 {
        return (0..true_cluster.len()).collect();
    }
    let mut out = Vec::new();
    for c in 0..num_clusters {
        let mut members: Vec<usize> = (0..true_cluster.len())
            .filter(|&i| true_cluster[i] == c)
            .collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len();
        let m = ((ratio * n as f64).round() as usize).clamp(1, n);
        let mut rng = RngStream::new(seed, c, t, Purpose::Participation).rng();
        let (chosen, _) = members.partial_shuffle(&mut rng, m);
        out.extend_from_slice(chosen);
    }
    out.sort_unstable();
    out
}

/// What happened to every client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub participants: Vec<usize>,
    /// This round's upload per client; `None` for absentees and for the
    /// self-assignment schemes, which upload into cluster slots instead.
    pub uploads: Vec<Option<Vec<f64>>>,
    /// Server-side cluster label per client; `None` until first upload.
    pub labels: Vec<Option<usize>>,
    /// Model received at the end of the round, if any.
    pub received: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct Phase2Output {
    pub logs: Vec<RoundLog>,
    /// `(round, K×K similarity)`; empty unless snapshots are enabled.
    pub similarity: Vec<(usize, Mat)>,
    pub traces: Vec<RoundTrace>,
}

fn temporal_rule(scheme: Scheme) -> TemporalRule {
    match scheme {
        Scheme::FedreactA1 | Scheme::Snapshot => TemporalRule::A1,
        Scheme::FedreactA2 => TemporalRule::A2,
        _ => TemporalRule::Memoryless,
    }
}

fn uses_affect(scheme: Scheme) -> bool {
    matches!(
        scheme,
        Scheme::FedreactA1 | Scheme::FedreactA2 | Scheme::EcMma
    )
}

fn submatrix(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

fn scatter(m: &mut Mat, idx: &[usize], sub: &Mat) {
    for (i, &a) in idx.iter().enumerate() {
        for (j, &b) in idx.iter().enumerate() {
            m.row_mut(a)[b] = sub[(i, j)];
        }
    }
}

struct Round<'a> {
    t: usize,
    env: &'a RoundEnv,
    participants: Vec<usize>,
    data: Vec<Dataset>,
    tests: &'a [Dataset],
}

fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Empty("test set".into()))?;
    let cols = first.features.cols();
    let rows: usize = parts.iter().map(Dataset::len).sum();
    let mut values = Vec::with_capacity(rows * cols);
    let (mut labels, mut targets) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
    for p in parts {
        values.extend_from_slice(p.features.as_slice());
        labels.extend_from_slice(&p.labels);
        targets.extend_from_slice(&p.targets);
    }
    Ok(Dataset {
        features: Mat::from_vec(rows, cols, values)?,
        labels,
        targets,
    })
}

/// Runs `task_rounds` rounds of the configured scheme on features from the
/// phase-1 encoder.
pub fn run_phase2(
    cfg: &ExperimentConfig,
    world: &World,
    phase1: &Phase1Output,
) -> Result<Phase2Output> {
    cfg.validate()?;
    let train = cfg.train();
    train.validate()?;
    if phase1.encoder.input_dim() != world.input_dim() {
        return Err(Error::shape(world.input_dim(), phase1.encoder.input_dim()));
    }
    let k = world.num_clients();
    let kind = cfg.task;
    let dim = phase1.encoder.embed_dim();
    let init = kind.init(cfg.num_labels, dim);
    let schedule = world.schedule(cfg.task_rounds, 0)?;

    let make_data = |env: &RoundEnv,
                     client: usize,
                     t: usize,
                     size: usize,
                     purpose: Purpose|
     -> Result<Dataset> {
        let b = world.client_batch(env, client, t, size, purpose)?;
        Ok(Dataset {
            features: phase1.features(&b.x)?,
            labels: b.labels,
            targets: b.targets,
        })
    };

    let mut driver: Box<dyn SchemeDriver> = match cfg.scheme {
        Scheme::Ifca | Scheme::Flsc => {
            let mut rng = RngStream::new(cfg.seed, 0, 0, Purpose::ClusterInit).rng();
            Box::new(SelfAssignDriver {
                models: init_cluster_models(cfg.clusters_assumed(), init.outputs(), dim, &mut rng),
                choice: vec![None; k],
            })
        }
        _ => Box::new(ClusteredDriver {
            held: vec![None; k],
            last_upload: vec![None; k],
            psi: Mat::zeros(k, k),
            state: ClusterModelState::new(temporal_rule(cfg.scheme)),
        }),
    };

    // Each client's held-out set spans the whole horizon: sample j comes
    // from round (j mod T) + 1.
    let tests = (0..k)
        .into_par_iter()
        .map(|i| {
            let parts = schedule
                .iter()
                .enumerate()
                .filter_map(|(r, env)| {
                    let n = (cfg.test_size + cfg.task_rounds - 1 - r) / cfg.task_rounds;
                    (n > 0).then(|| make_data(env, i, r + 1, n, Purpose::TestSet))
                })
                .collect::<Result<Vec<_>>>()?;
            concat(&parts)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Phase2Output {
        logs: Vec::with_capacity(cfg.task_rounds),
        similarity: Vec::new(),
        traces: Vec::with_capacity(cfg.task_rounds),
    };
    for (idx, env) in schedule.iter().enumerate() {
        let t = idx + 1;
        let participants = sample_participants(
            cfg.seed,
            &env.client_cluster,
            cfg.clusters_true,
            cfg.participation,
            t,
        );
        let data = participants
            .par_iter()
            .map(|&i| make_data(env, i, t, cfg.batch_size, Purpose::TaskBatch))
            .collect::<Result<Vec<_>>>()?;
        let round = Round {
            t,
            env,
            participants,
            data,
            tests: &tests,
        };
        let (log, trace, sim) = driver.step(cfg, &init, &round)?;
        log.validate()?;
        out.logs.push(log);
        out.traces.push(trace);
        if cfg.similarity_snapshots {
            if let Some(s) = sim {
                out.similarity.push((t, s));
            }
        }
    }
    Ok(out)
}

type StepOutput = (RoundLog, RoundTrace, Option<Mat>);

trait SchemeDriver {
    fn step(
        &mut self,
        cfg: &ExperimentConfig,
        init: &TaskModelParams,
        round: &Round,
    ) -> Result<StepOutput>;
}

/// Server-side clustering of uploaded parameters.
struct ClusteredDriver {
    /// Last model each client received; the starting point of its next round.
    held: Vec<Option<TaskModelParams>>,
    last_upload: Vec<Option<Vec<f64>>>,
    /// Smoothed similarity over all clients; rows of unknown clients stay zero.
    psi: Mat,
    state: ClusterModelState,
}

impl SchemeDriver for ClusteredDriver {
    fn step(
        &mut self,
        cfg: &ExperimentConfig,
        init: &TaskModelParams,
        round: &Round,
    ) -> Result<StepOutput> {
        let k = self.held.len();
        let t = round.t;
        let train = cfg.train();
        let trained = round
            .participants
            .par_iter()
            .zip(&round.data)
            .map(|(&i, d)| {
                let start = self.held[i].as_ref().unwrap_or(init);
                let mut rng = RngStream::new(cfg.seed, i, t, Purpose::TaskTrain).rng();
                Ok(cfg.task.train(start, d, &train, &mut rng)?.vectorize())
            })
            .collect::<Result<Vec<_>>>()?;

        let mut uploads: Vec<Option<Vec<f64>>> = vec![None; k];
        let mut sizes = vec![0.0; k];
        for ((&i, v), d) in round.participants.iter().zip(trained).zip(&round.data) {
            self.last_upload[i] = Some(v.clone());
            uploads[i] = Some(v);
            sizes[i] = d.len() as f64;
        }

        let known: Vec<usize> = (0..k).filter(|&i| self.last_upload[i].is_some()).collect();
        let vectors: Vec<Vec<f64>> = known
            .iter()
            .map(|&i| self.last_upload[i].clone().unwrap())
            .collect();
        let w = similarity_matrix(&vectors)?;
        let ce = cfg.clusters_assumed().min(known.len());
        let (a_t, assignment, sim) = if uses_affect(cfg.scheme) {
            let prev = submatrix(&self.psi, &known);
            let (psi, a, asg) = affect_iterate(&prev, &w, ce, cfg.affect_iters)?;
            scatter(&mut self.psi, &known, &psi);
            (a, asg, self.psi.clone())
        } else {
            let mut full = Mat::zeros(k, k);
            scatter(&mut full, &known, &w);
            (0.0, agglomerative(&w, ce)?, full)
        };

        let clusters: Vec<Vec<usize>> = assignment
            .members()
            .into_iter()
            .map(|m| m.into_iter().map(|j| known[j]).collect())
            .collect();
        let round_models = clusters
            .iter()
            .map(|members| {
                let part: Vec<(&[f64], f64)> = members
                    .iter()
                    .filter_map(|&i| uploads[i].as_deref().map(|v| (v, sizes[i])))
                    .collect();
                if part.is_empty() {
                    Ok(None)
                } else {
                    cluster_weighted_average(&part).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let sent = self
            .state
            .advance(&clusters, &round_models, a_t, t, cfg.task_rounds)?;

        let (outputs, dim) = (init.outputs(), init.dim());
        let mut received: Vec<Option<Vec<f64>>> = vec![None; k];
        let mut recipients = 0;
        let mut labels: Vec<Option<usize>> = vec![None; k];
        let mut eval_models = Vec::with_capacity(clusters.len());
        for (c, members) in clusters.iter().enumerate() {
            for &i in members {
                labels[i] = Some(c);
            }
            if let Some(model) = &sent[c] {
                let params = TaskModelParams::from_flat(model, outputs, dim)?;
                for &i in members.iter().filter(|&&i| uploads[i].is_some()) {
                    self.held[i] = Some(params.clone());
                    received[i] = Some(model.clone());
                    recipients += 1;
                }
            }
            let eval = match self.state.model_for(c) {
                Some(m) => TaskModelParams::from_flat(m, outputs, dim)?,
                None => init.clone(),
            };
            eval_models.push(eval);
        }

        let truth: Vec<usize> = known.iter().map(|&i| round.env.client_cluster[i]).collect();
        let pred: Vec<usize> = assignment.labels.clone();
        let tests: Vec<Dataset> = known.iter().map(|&i| round.tests[i].clone()).collect();
        let metric = cluster_avg_metric(cfg.task, &eval_models, &pred, &tests)?;

        let mut comm = CommCounter::default();
        comm.upload(round.participants.len(), 1, init.flat_len());
        comm.download(recipients, 1, init.flat_len());
        let log = RoundLog {
            round: t,
            rand_score: rand_score(&pred, &truth)?,
            metric,
            a_t,
            participants: round.participants.len(),
            cluster_sizes: clusters.iter().map(Vec::len).collect(),
            bytes_up: comm.bytes_up,
            bytes_down: comm.bytes_down,
            regret_grad_sq: None,
        };
        let trace = RoundTrace {
            round: t,
            participants: round.participants.clone(),
            uploads,
            labels,
            received,
        };
        Ok((log, trace, Some(sim)))
    }
}

/// Clients pick among the server's cluster models by local loss.
struct SelfAssignDriver {
    models: Vec<TaskModelParams>,
    /// Latest lowest-loss choice per client; absentees keep theirs.
    choice: Vec<Option<usize>>,
}

impl SchemeDriver for SelfAssignDriver {
    fn step(
        &mut self,
        cfg: &ExperimentConfig,
        init: &TaskModelParams,
        round: &Round,
    ) -> Result<StepOutput> {
        let k = self.choice.len();
        let t = round.t;
        let tau = if cfg.scheme == Scheme::Ifca {
            1
        } else {
            cfg.flsc_tau
        };
        let participants = &round.participants;
        let res = flsc_round(
            cfg.task,
            &self.models,
            &round.data,
            tau,
            &cfg.train(),
            |j| RngStream::new(cfg.seed, participants[j], t, Purpose::TaskTrain).rng(),
        )?;
        for (&i, c) in participants.iter().zip(res.hard_assignment()) {
            self.choice[i] = Some(c);
        }
        self.models = res.models;

        let known: Vec<usize> = (0..k).filter(|&i| self.choice[i].is_some()).collect();
        let pred: Vec<usize> = known.iter().map(|&i| self.choice[i].unwrap()).collect();
        let truth: Vec<usize> = known.iter().map(|&i| round.env.client_cluster[i]).collect();
        let tests: Vec<Dataset> = known.iter().map(|&i| round.tests[i].clone()).collect();
        let metric = cluster_avg_metric(cfg.task, &self.models, &pred, &tests)?;

        let c = self.models.len();
        let mut sizes = vec![0; c];
        for &p in &pred {
            sizes[p] += 1;
        }
        let mut comm = CommCounter::default();
        comm.upload(participants.len(), 1, init.flat_len());
        comm.download(participants.len(), c, init.flat_len());

        let mut labels = vec![None; k];
        let mut received = vec![None; k];
        for &i in participants {
            labels[i] = self.choice[i];
            received[i] = self.choice[i].map(|c| self.models[c].vectorize());
        }
        for &i in &known {
            labels[i] = self.choice[i];
        }
        let log = RoundLog {
            round: t,
            rand_score: rand_score(&pred, &truth)?,
            metric,
            a_t: 0.0,
            participants: participants.len(),
            cluster_sizes: sizes,
            bytes_up: comm.bytes_up,
            bytes_down: comm.bytes_down,
            regret_grad_sq: None,
        };
        let trace = RoundTrace {
            round: t,
            participants: participants.clone(),
            uploads: vec![None; k],
            labels,
            received,
        };
        Ok((log, trace, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::phase1::run_phase1;

    #[test]
    fn stratified_participation_counts() {
        let truth: Vec<usize> = (0..30).map(|i| i / 10).collect();
        let p = sample_participants(3, &truth, 3, 1.0 / 3.0, 4);
        assert_eq!(p.len(), 9);
        for c in 0..3 {
            assert_eq!(p.iter().filter(|&&i| truth[i] == c).count(), 3);
        }
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(p, sample_participants(3, &truth, 3, 1.0 / 3.0, 4));
        assert_eq!(
            sample_participants(3, &truth, 3, 1.0, 4),
            (0..30).collect::<Vec<_>>()
        );
        // tiny ratio still picks one per cluster
        assert_eq!(sample_participants(3, &truth, 3, 0.01, 1).len(), 3);
    }

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            clients: 9,
            encoder_rounds: 2,
            task_rounds: 3,
            batch_size: 16,
            test_size: 8,
            task_steps: 40,
            warmup_samples: 45,
            ..ExperimentConfig::default()
        }
    }

    fn run(cfg: &ExperimentConfig) -> Phase2Output {
        let world = World::new(cfg.world(), cfg.clients, cfg.seed).unwrap();
        let p1 = run_phase1(cfg, &world).unwrap();
        run_phase2(cfg, &world, &p1).unwrap()
    }

    #[test]
    fn single_round_a1_estimate_is_round_model() {
        let cfg = ExperimentConfig {
            task_rounds: 1,
            ..small()
        };
        let out = run(&cfg);
        assert_eq!(out.logs.len(), 1);
        let tr = &out.traces[0];
        // the broadcast is the plain weighted mean of each cluster's uploads
        for c in 0..cfg.clusters_assumed() {
            let members: Vec<usize> = (0..cfg.clients)
                .filter(|&i| tr.labels[i] == Some(c))
                .collect();
            let part: Vec<(&[f64], f64)> = members
                .iter()
                .map(|&i| (tr.uploads[i].as_deref().unwrap(), cfg.batch_size as f64))
                .collect();
            let mean = cluster_weighted_average(&part).unwrap();
            for &i in &members {
                assert_eq!(tr.received[i].as_ref().unwrap(), &mean);
            }
        }
    }

    #[test]
    fn partial_participation_never_broadcasts_to_absentees() {
        let cfg = ExperimentConfig {
            participation: 1.0 / 3.0,
            ..small()
        };
        let out = run(&cfg);
        for (log, tr) in out.logs.iter().zip(&out.traces) {
            assert_eq!(log.participants, 3);
            for i in 0..cfg.clients {
                if !tr.participants.contains(&i) {
                    assert!(tr.uploads[i].is_none() && tr.received[i].is_none());
                }
            }
        }
    }

    #[test]
    fn every_scheme_produces_valid_logs() {
        for scheme in Scheme::ALL {
            let cfg = ExperimentConfig {
                scheme,
                similarity_snapshots: true,
                ..small()
            };
            let out = run(&cfg);
            assert_eq!(out.logs.len(), 3, "{scheme}");
            for log in &out.logs {
                log.validate().unwrap();
            }
            let has_sim = !matches!(scheme, Scheme::Ifca | Scheme::Flsc);
            assert_eq!(
                out.similarity.len(),
                if has_sim { 3 } else { 0 },
                "{scheme}"
            );
        }
    }

    #[test]
    fn ifca_downloads_every_cluster_model() {
        let cfg = ExperimentConfig {
            scheme: Scheme::Ifca,
            ..small()
        };
        let out = run(&cfg);
        let plen = (cfg.num_labels * (cfg.embed_dim + 1)) as u64;
        for log in &out.logs {
            assert_eq!(log.bytes_down, 9 * 3 * plen * 8);
            assert_eq!(log.bytes_up, 9 * plen * 8);
        }
    }
}
