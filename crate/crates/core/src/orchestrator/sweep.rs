//! Window/decay sweep of the smoothed gradient norm, and cluster-count
//! estimation from per-client task models.

use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Strategy, World};
use crate::encoder::{ssl_linear_loss, EncoderParams, SmoothingConfig};
use crate::error::{Error, Result};
use crate::evocluster::{estimate_cluster_count, ClusterCountEstimate};
use crate::numerics::{top_eigenvalue, Mat, Purpose, RngStream};
use crate::taskmodel::Dataset;

use super::config::ExperimentConfig;
use super::phase1::{run_phase1, run_smoothed_federated, second_moment, ClientStep};

/// Data regime of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepData {
    /// Fresh minibatches with augmentation noise from covariances that switch
    /// by a per-client Markov chain.
    Drifting,
    /// One fixed full batch per client, no noise.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct SweepConfig {
    pub seed: u64,
    pub clients: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub rounds: usize,
    /// Rows per client per round (drifting) or of the fixed batch (static).
    pub batch: usize,
    pub regimes: usize,
    /// Per-round probability that a client switches covariance.
    pub switch_prob: f64,
    pub noise: f64,
    pub data: SweepData,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clients: 4,
            input_dim: 10,
            embed_dim: 3,
            rounds: 2000,
            batch: 8,
            regimes: 2,
            switch_prob: 0.05,
            noise: 0.1,
            data: SweepData::Drifting,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0
            || self.input_dim == 0
            || self.embed_dim == 0
            || self.batch == 0
            || self.regimes == 0
        {
            return Err(Error::Config("sweep sizes must be positive".into()));
        }
        if self.embed_dim > self.input_dim {
            return Err(Error::Config("embed-dim exceeds input-dim".into()));
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(Error::Config(format!(
                "switch-prob {} outside [0, 1]",
                self.switch_prob
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config("noise must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window: usize,
    pub decay: f64,
    /// `(1/T) Σ_t ‖∇S_t‖²`.
    pub avg_grad_sq: f64,
    pub final_grad_sq: f64,
    pub step: f64,
    pub radius_sq: f64,
}

pub const SWEEP_HEADER: &str = "window,decay,avg_grad_sq,final_grad_sq,step,radius_sq";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.window,
            self.decay,
            self.avg_grad_sq,
            self.final_grad_sq,
            self.step,
            self.radius_sq
        )
    }
}

fn gaussian(
    rows: usize,
    cols: usize,
    scale: f64,
    purpose: Purpose,
    seed: u64,
    entity: usize,
    round: usize,
) -> Mat {
    let mut rng = RngStream::new(seed, entity, round, purpose).rng();
    Mat::from_fn(rows, cols, |_, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        scale * e
    })
}

/// Shared problem instance: mixing matrices, regime paths and fixed batches.
struct SweepProblem {
    mixing: Vec<Mat>,
    /// `regime[k][t-1]`.
    regime: Vec<Vec<usize>>,
    fixed: Vec<Mat>,
}

impl SweepProblem {
    fn new(cfg: &SweepConfig) -> Self {
        let d = cfg.input_dim;
        let mixing = (0..cfg.regimes)
            .map(|r| {
                gaussian(
                    d,
                    d,
                    1.0 / (d as f64).sqrt(),
                    Purpose::Sweep,
                    cfg.seed,
                    r,
                    0,
                )
            })
            .collect();
        let regime = (0..cfg.clients)
            .map(|k| {
                let mut rng = RngStream::new(cfg.seed, k, 1, Purpose::Drift).rng();
                let mut cur = k % cfg.regimes;
                (0..cfg.rounds)
                    .map(|_| {
                        let u: f64 = rand::Rng::random(&mut rng);
                        if cfg.regimes > 1 && u < cfg.switch_prob {
                            cur = (cur + 1 + rand::Rng::random_range(&mut rng, 0..cfg.regimes - 1))
                                % cfg.regimes;
                        }
                        cur
                    })
                    .collect()
            })
            .collect();
        let mut problem = Self {
            mixing,
            regime,
            fixed: Vec::new(),
        };
        problem.fixed = (0..cfg.clients)
            .map(|k| problem.batch(cfg, k, k % cfg.regimes, 2))
            .collect();
        problem
    }

    /// Rows `x = L_r z` with `z ~ N(0, I)`.
    fn batch(&self, cfg: &SweepConfig, k: usize, regime: usize, round: usize) -> Mat {
        let z = gaussian(
            cfg.batch,
            cfg.input_dim,
            1.0,
            Purpose::EncoderBatch,
            cfg.seed,
            k,
            round,
        );
        z.matmul(&self.mixing[regime].transpose())
            .expect("square mixing")
    }

    fn pooled(&self, cfg: &SweepConfig) -> Result<Mat> {
        let rows: Vec<f64> = self
            .fixed
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect();
        Mat::from_vec(cfg.batch * cfg.clients, cfg.input_dim, rows)
    }
}

/// `(1/T) Σ ‖∇S‖²` for every `(w, γ)` pair, on the same problem instance.
///
/// Squared radius `Γ = max(4, d̂) λ₁` and step `1/(16 Γ)`, the inverse of the
/// loss's smoothness constant over the ball. `λ₁` is the top eigenvalue of the
/// pooled fixed batches' second moment.
pub fn theorem1_sweep(
    cfg: &SweepConfig,
    windows: &[usize],
    decays: &[f64],
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let problem = SweepProblem::new(cfg);
    let lambda = top_eigenvalue(&second_moment(&problem.pooled(cfg)?)?, 500)?;
    if !(lambda > 0.0) {
        return Err(Error::Degenerate("sweep data has no energy".into()));
    }
    let radius_sq = (cfg.embed_dim as f64).max(4.0) * lambda;
    let step = 1.0 / (16.0 * radius_sq);
    let init = {
        let mut p = EncoderParams {
            theta: gaussian(
                cfg.embed_dim,
                cfg.input_dim,
                0.1,
                Purpose::EncoderInit,
                cfg.seed,
                0,
                0,
            ),
        };
        p.project(radius_sq);
        p
    };
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let oracle = |k: usize, t: usize, theta: &EncoderParams| -> Result<ClientStep> {
        let x = match cfg.data {
            SweepData::Static => problem.fixed[k].clone(),
            SweepData::Drifting => problem.batch(cfg, k, problem.regime[k][t - 1], t + 2),
        };
        let n = x.rows();
        let (a, b) = match cfg.data {
            SweepData::Static => (Mat::zeros(n, cfg.embed_dim), Mat::zeros(n, cfg.embed_dim)),
            SweepData::Drifting => {
                let mut rng = RngStream::new(cfg.seed, k, t, Purpose::EncoderNoise).rng();
                let mut draw = || Mat::from_fn(n, cfg.embed_dim, |_, _| noise.sample(&mut rng));
                (draw(), draw())
            }
        };
        let (loss, grad) = ssl_linear_loss(theta, &x, &a, &b)?;
        Ok((loss, grad, n as f64))
    };

    let pairs: Vec<(usize, f64)> = windows
        .iter()
        .flat_map(|&w| decays.iter().map(move |&g| (w, g)))
        .collect();
    pairs
        .par_iter()
        .map(|&(window, decay)| {
            let smoothing = SmoothingConfig {
                window,
                decay,
                step,
                radius_sq,
            };
            let (_, trace) =
                run_smoothed_federated(init.clone(), cfg.clients, cfg.rounds, &smoothing, &oracle)?;
            let avg = trace.iter().map(|r| r.grad_sq).sum::<f64>() / trace.len().max(1) as f64;
            Ok(SweepRow {
                window,
                decay,
                avg_grad_sq: avg,
                final_grad_sq: trace.last().map_or(0.0, |r| r.grad_sq),
                step,
                radius_sq,
            })
        })
        .collect()
}

/// Trains a phase-1 encoder on a stationary world, fits one task model per
/// client on a single batch, and scores candidate cluster counts on the
/// resulting parameter vectors.
pub fn estimate_clusters(
    cfg: &ExperimentConfig,
    c_range: &[usize],
) -> Result<ClusterCountEstimate> {
    let cfg = ExperimentConfig {
        strategy: Strategy::Stationary,
        ..cfg.clone()
    };
    cfg.validate()?;
    let world = World::new(cfg.world(), cfg.clients, cfg.seed)?;
    let phase1 = run_phase1(&cfg, &world)?;
    let env = world.schedule(1, 0)?.remove(0);
    let init = cfg.task.init(cfg.num_labels, cfg.embed_dim);
    let train = cfg.train();
    let vectors = (0..cfg.clients)
        .into_par_iter()
        .map(|k| {
            let b = world.client_batch(&env, k, 1, cfg.batch_size, Purpose::TaskBatch)?;
            let data = Dataset {
                features: phase1.features(&b.x)?,
                labels: b.labels,
                targets: b.targets,
            };
            let mut rng = RngStream::new(cfg.seed, k, 1, Purpose::TaskTrain).rng();
            Ok(cfg.task.train(&init, &data, &train, &mut rng)?.vectorize())
        })
        .collect::<Result<Vec<_>>>()?;
    estimate_cluster_count(&vectors, c_range)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(data: SweepData) -> SweepConfig {
        SweepConfig {
            rounds: 50,
            data,
            ..SweepConfig::default()
        }
    }

    #[test]
    fn window_one_is_plain_gradient_average() {
        let cfg = quick(SweepData::Drifting);
        let rows = theorem1_sweep(&cfg, &[1], &[0.5, 0.999]).unwrap();
        // with a single term the decay has no effect
        assert_eq!(rows[0].avg_grad_sq, rows[1].avg_grad_sq);

        let problem = SweepProblem::new(&cfg);
        let mut theta = EncoderParams {
            theta: gaussian(3, 10, 0.1, Purpose::EncoderInit, cfg.seed, 0, 0),
        };
        theta.project(rows[0].radius_sq);
        let mut total = 0.0;
        let noise = Normal::new(0.0, cfg.noise).unwrap();
        for t in 1..=cfg.rounds {
            let mut mean = Mat::zeros(3, 10);
            let mut locals = Vec::new();
            for k in 0..cfg.clients {
                let x = problem.batch(&cfg, k, problem.regime[k][t - 1], t + 2);
                let mut rng = RngStream::new(cfg.seed, k, t, Purpose::EncoderNoise).rng();
                let mut draw = || Mat::from_fn(8, 3, |_, _| noise.sample(&mut rng));
                let (a, b) = (draw(), draw());
                let (_, mut g) = ssl_linear_loss(&theta, &x, &a, &b).unwrap();
                crate::numerics::project_in_place(g.as_mut_slice(), rows[0].radius_sq);
                mean.add_scaled(1.0 / cfg.clients as f64, &g).unwrap();
                let mut local = theta.theta.clone();
                local.add_scaled(-rows[0].step, &g).unwrap();
                let mut p = EncoderParams { theta: local };
                p.project(rows[0].radius_sq);
                locals.push(p);
            }
            total += mean.frobenius_sq();
            let refs: Vec<(&EncoderParams, f64)> = locals.iter().map(|p| (p, 8.0)).collect();
            theta = crate::encoder::fedavg_aggregate(&refs).unwrap();
        }
        let oracle = total / cfg.rounds as f64;
        assert!((rows[0].avg_grad_sq - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }

    #[test]
    fn static_run_is_deterministic_and_decreasing() {
        let cfg = SweepConfig {
            rounds: 400,
            ..quick(SweepData::Static)
        };
        let a = theorem1_sweep(&cfg, &[1, 5], &[0.9]).unwrap();
        let b = theorem1_sweep(&cfg, &[1, 5], &[0.9]).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.final_grad_sq < r.avg_grad_sq));
    }

    #[test]
    fn invalid_sweep_config() {
        let cfg = SweepConfig {
            embed_dim: 20,
            ..SweepConfig::default()
        };
        assert!(theorem1_sweep(&cfg, &[1], &[0.9]).unwrap_err().is_config());
    }
}
