//! Federated representation learning with time-smoothed projected updates.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_triplets, World};
use crate::encoder::{
    contrastive_batch_loss, fedavg_aggregate, local_smoothed_update, project_gradient,
    ssl_linear_loss, EncoderParams, GradientBuffer, SmoothingConfig,
};
use crate::error::{Error, Result};
use crate::metrics::regret_terms;
use crate::numerics::{top_eigenvalue, Mat, Purpose, RngStream};

use super::config::{EncoderLoss, ExperimentConfig};

/// Round-key offset that keeps phase-1 streams disjoint from phase 2.
pub const PHASE1_ROUND_BASE: usize = 1 << 20;

/// Per-round trace of the smoothed objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Row {
    pub round: usize,
    /// Mean client loss at the broadcast iterate.
    pub mean_loss: f64,
    /// Client mean of the windowed regret.
    pub global_regret: f64,
    /// `‖mean of smoothed projected gradients‖²`.
    pub grad_sq: f64,
}

pub const PHASE1_HEADER: &str = "round,mean_loss,global_regret,grad_sq";

impl Phase1Row {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.round, self.mean_loss, self.global_regret, self.grad_sq
        )
    }
}

/// One client's contribution in a round: loss, raw gradient, aggregation weight.
pub type ClientStep = (f64, Mat, f64);

/// Runs `rounds` of federated time-smoothed descent from `init`.
///
/// `oracle(client, round, θ)` evaluates the client's loss and gradient at the
/// broadcast iterate. Gradients are projected onto the feasible ball before
/// buffering, local iterates after the step.
pub fn run_smoothed_federated<F>(
    init: EncoderParams,
    clients: usize,
    rounds: usize,
    cfg: &SmoothingConfig,
    oracle: F,
) -> Result<(EncoderParams, Vec<Phase1Row>)>
where
    F: Fn(usize, usize, &EncoderParams) -> Result<ClientStep> + Sync,
{
    cfg.validate()?;
    if clients == 0 {
        return Err(Error::Config("phase 1 needs at least one client".into()));
    }
    let mut global = init;
    let mut buffers: Vec<GradientBuffer> = (0..clients)
        .map(|_| GradientBuffer::new(cfg.window))
        .collect();
    let mut losses: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.window + 1); clients];
    let mut trace = Vec::with_capacity(rounds);

    for t in 1..=rounds {
        let steps = (0..clients)
            .into_par_iter()
            .map(|k| oracle(k, t, &global))
            .collect::<Result<Vec<_>>>()?;

        let mut locals = Vec::with_capacity(clients);
        let mut smoothed = Vec::with_capacity(clients);
        let mut mean_loss = 0.0;
        for (k, (loss, grad, weight)) in steps.into_iter().enumerate() {
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "client {k} gradient in round {t}"
                )));
            }
            mean_loss += loss / clients as f64;
            buffers[k].push(t, project_gradient(grad, cfg.radius_sq))?;
            losses[k].insert(0, loss);
            losses[k].truncate(cfg.window);
            let mut local = local_smoothed_update(&global, &buffers[k], cfg)?;
            local.project(cfg.radius_sq);
            smoothed.push(buffers[k].smoothed(cfg.decay)?);
            locals.push((local, weight));
        }
        let regret = regret_terms(&losses, &smoothed, cfg.window, cfg.decay)?;
        trace.push(Phase1Row {
            round: t,
            mean_loss,
            global_regret: regret.global,
            grad_sq: regret.grad_sq,
        });
        let refs: Vec<(&EncoderParams, f64)> = locals.iter().map(|(p, w)| (p, *w)).collect();
        global = fedavg_aggregate(&refs)?;
    }
    Ok((global, trace))
}

/// Trained encoder and the quantities derived on the warm-up batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase1Output {
    pub encoder: EncoderParams,
    pub smoothing: SmoothingConfig,
    /// Largest eigenvalue of the warm-up second-moment matrix.
    pub lambda_max: f64,
    /// Multiplier that gives encoded warm-up features unit RMS norm.
    pub feature_scale: f64,
    pub trace: Vec<Phase1Row>,
}

impl Phase1Output {
    /// Encodes and rescales a batch for the task heads.
    pub fn features(&self, x: &Mat) -> Result<Mat> {
        let mut f = self.encoder.encode_batch(x)?;
        f.scale(self.feature_scale);
        Ok(f)
    }
}

/// `XᵀX / n`.
pub fn second_moment(x: &Mat) -> Result<Mat> {
    if x.rows() == 0 {
        return Err(Error::Empty("warm-up batch".into()));
    }
    let mut m = x.transpose().matmul(x)?;
    m.scale(1.0 / x.rows() as f64);
    Ok(m)
}

fn warmup_batch(cfg: &ExperimentConfig, world: &World) -> Result<Mat> {
    let env = world.schedule(1, PHASE1_ROUND_BASE - 1)?.remove(0);
    let k = world.num_clients();
    let per_client = cfg.warmup_samples.div_ceil(k);
    let dim = world.input_dim();
    let mut rows = Vec::with_capacity(per_client * k * dim);
    for client in 0..k {
        let b = world.client_batch(&env, client, 0, per_client, Purpose::WarmUp)?;
        rows.extend_from_slice(b.x.as_slice());
    }
    Mat::from_vec(per_client * k, dim, rows)
}

/// Phase 1 on the synthetic world. Returns the initial encoder when
/// `encoder_rounds = 0`.
pub fn run_phase1(cfg: &ExperimentConfig, world: &World) -> Result<Phase1Output> {
    let warm = warmup_batch(cfg, world)?;
    let lambda_max = top_eigenvalue(&second_moment(&warm)?, 500)?;
    if !(lambda_max > 0.0) {
        return Err(Error::Degenerate("warm-up batch has no energy".into()));
    }
    let smoothing = SmoothingConfig {
        window: cfg.window,
        decay: cfg.decay,
        step: cfg.step_size.unwrap_or(1.0 / (16.0 * lambda_max)),
        radius_sq: cfg
            .radius_sq
            .unwrap_or(4.0 * cfg.embed_dim as f64 * lambda_max),
    };
    let dim = world.input_dim();
    let mut init_rng = RngStream::new(cfg.seed, 0, 0, Purpose::EncoderInit).rng();
    let mut init =
        EncoderParams::random(cfg.embed_dim, dim, 1.0 / (dim as f64).sqrt(), &mut init_rng);
    init.project(smoothing.radius_sq);

    let schedule = world.schedule(cfg.encoder_rounds, PHASE1_ROUND_BASE)?;
    let noise =
        Normal::new(0.0, cfg.ssl_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let oracle = |k: usize, t: usize, theta: &EncoderParams| -> Result<ClientStep> {
        let env = &schedule[t - 1];
        let key = PHASE1_ROUND_BASE + t;
        match cfg.encoder_loss {
            EncoderLoss::Contrastive => {
                let spec = &world.clusters[env.client_cluster[k]];
                let mut rng = RngStream::new(cfg.seed, k, key, Purpose::EncoderBatch).rng();
                let triplets = sample_triplets(
                    spec,
                    &env.client_dist[k],
                    cfg.triplets,
                    cfg.negatives,
                    &mut rng,
                )?;
                let (loss, grad) = contrastive_batch_loss(theta, &triplets)?;
                Ok((loss, grad, cfg.triplets as f64))
            }
            EncoderLoss::Ssl => {
                let batch = world.client_batch(env, k, key, cfg.triplets, Purpose::EncoderBatch)?;
                let mut rng = RngStream::new(cfg.seed, k, key, Purpose::EncoderNoise).rng();
                let n = batch.len();
                let mut draw = || Mat::from_fn(n, cfg.embed_dim, |_, _| noise.sample(&mut rng));
                let (a, b) = (draw(), draw());
                let (loss, grad) = ssl_linear_loss(theta, &batch.x, &a, &b)?;
                Ok((loss, grad, n as f64))
            }
        }
    };
    let (encoder, trace) = run_smoothed_federated(
        init,
        world.num_clients(),
        cfg.encoder_rounds,
        &smoothing,
        oracle,
    )?;

    let feats = encoder.encode_batch(&warm)?;
    let rms = (feats.frobenius_sq() / warm.rows() as f64).sqrt();
    let feature_scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    Ok(Phase1Output {
        encoder,
        smoothing,
        lambda_max,
        feature_scale,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            clients: 6,
            encoder_rounds: 3,
            triplets: 8,
            warmup_samples: 60,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_rounds_keeps_initial_encoder() {
        let cfg = ExperimentConfig {
            encoder_rounds: 0,
            ..small_cfg()
        };
        let world = World::new(cfg.world(), cfg.clients, cfg.seed).unwrap();
        let out = run_phase1(&cfg, &world).unwrap();
        let mut rng = RngStream::new(cfg.seed, 0, 0, Purpose::EncoderInit).rng();
        let dim = world.input_dim();
        let mut init =
            EncoderParams::random(cfg.embed_dim, dim, 1.0 / (dim as f64).sqrt(), &mut rng);
        init.project(out.smoothing.radius_sq);
        assert_eq!(out.encoder, init);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn iterates_stay_in_ball_and_trace_is_finite() {
        for loss in [EncoderLoss::Contrastive, EncoderLoss::Ssl] {
            let cfg = ExperimentConfig {
                encoder_loss: loss,
                ..small_cfg()
            };
            let world = World::new(cfg.world(), cfg.clients, cfg.seed).unwrap();
            let out = run_phase1(&cfg, &world).unwrap();
            assert!(out.encoder.norm_sq() <= out.smoothing.radius_sq * (1.0 + 1e-12));
            assert_eq!(out.trace.len(), 3);
            assert!(out
                .trace
                .iter()
                .all(|r| r.grad_sq.is_finite() && r.global_regret.is_finite()));
        }
    }

    /// Quadratic `½‖θ − c_k‖²` per client.
    fn quadratic(
        centers: Vec<Mat>,
    ) -> impl Fn(usize, usize, &EncoderParams) -> Result<ClientStep> + Sync {
        move |k, _, theta| {
            let mut g = theta.theta.clone();
            g.add_scaled(-1.0, &centers[k])?;
            Ok((0.5 * g.frobenius_sq(), g, 1.0))
        }
    }

    #[test]
    fn single_client_matches_centralized_loop() {
        let c = Mat::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        let cfg = SmoothingConfig {
            window: 3,
            decay: 0.8,
            step: 0.3,
            radius_sq: 100.0,
        };
        let init = EncoderParams::zeros(1, 2);
        let (fed, _) =
            run_smoothed_federated(init.clone(), 1, 10, &cfg, quadratic(vec![c.clone()])).unwrap();

        let mut theta = init;
        let mut buf = GradientBuffer::new(3);
        for t in 1..=10 {
            let mut g = theta.theta.clone();
            g.add_scaled(-1.0, &c).unwrap();
            buf.push(t, project_gradient(g, 100.0)).unwrap();
            theta = local_smoothed_update(&theta, &buf, &cfg).unwrap();
            theta.project(100.0);
        }
        assert_eq!(fed, theta);
    }

    #[test]
    fn identical_clients_aggregate_to_either_local_model() {
        let c = Mat::from_vec(1, 2, vec![0.5, 0.25]).unwrap();
        let cfg = SmoothingConfig {
            window: 2,
            decay: 0.9,
            step: 0.5,
            radius_sq: 10.0,
        };
        let init = EncoderParams::zeros(1, 2);
        let (two, _) = run_smoothed_federated(
            init.clone(),
            2,
            7,
            &cfg,
            quadratic(vec![c.clone(), c.clone()]),
        )
        .unwrap();
        let (one, _) = run_smoothed_federated(init, 1, 7, &cfg, quadratic(vec![c])).unwrap();
        assert_eq!(two, one);
    }

    #[test]
    fn window_one_reports_plain_gradient_norm() {
        let c = Mat::from_vec(1, 1, vec![2.0]).unwrap();
        let cfg = SmoothingConfig {
            window: 1,
            decay: 0.9,
            step: 0.5,
            radius_sq: 100.0,
        };
        let (_, trace) =
            run_smoothed_federated(EncoderParams::zeros(1, 1), 1, 3, &cfg, quadratic(vec![c]))
                .unwrap();
        // θ: 0 → 1 → 1.5; gradients −2, −1, −0.5
        let sq: Vec<f64> = trace.iter().map(|r| r.grad_sq).collect();
        assert_eq!(sq, vec![4.0, 1.0, 0.25]);
    }

    #[test]
    fn second_moment_example() {
        let x = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let m = second_moment(&x).unwrap();
        assert_eq!(m.as_slice(), &[0.5, 0.0, 0.0, 2.0]);
    }
}
