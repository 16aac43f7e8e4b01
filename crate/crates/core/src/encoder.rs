//! Phase-1 representation learning.
//!
//! The encoder is a single linear map `θ ∈ ℝ^{d̂×D}` applied to a flattened
//! `d×T` window. Two objectives are available: the sigmoid contrastive loss
//! over (anchor, positive, negatives) and the linear self-supervised objective
//! `−E[(θx+ξ)ᵀ(θx+ξ′)] + ½‖θᵀθ‖²_F` whose minimizer satisfies
//! `θᵀθ ≈` best rank-d̂ approximation of the data covariance. Clients update
//! with a γ-decayed window of their last `w` projected gradients.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, project_in_place, Mat};

/// Linear encoder weights, `embed_dim × input_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub theta: Mat,
}

impl EncoderParams {
    pub fn zeros(embed_dim: usize, input_dim: usize) -> Self {
        Self {
            theta: Mat::zeros(embed_dim, input_dim),
        }
    }

    /// Gaussian initialization with entries `N(0, scale²)`.
    pub fn random<R: Rng + ?Sized>(
        embed_dim: usize,
        input_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            theta: Mat::from_fn(embed_dim, input_dim, |_, _| {
                let e: f64 = StandardNormal.sample(rng);
                scale * e
            }),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.theta.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.theta.cols()
    }

    pub fn norm_sq(&self) -> f64 {
        self.theta.frobenius_sq()
    }

    /// Projects θ onto `{‖θ‖²_F ≤ radius_sq}`.
    pub fn project(&mut self, radius_sq: f64) {
        project_in_place(self.theta.as_mut_slice(), radius_sq);
    }

    /// Encodes every row of `x`, returning an `n × d̂` feature matrix.
    pub fn encode_batch(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), x.cols()));
        }
        let mut out = Mat::zeros(x.rows(), self.embed_dim());
        for i in 0..x.rows() {
            let xi = x.row(i);
            for (r, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = dot(self.theta.row(r), xi);
            }
        }
        Ok(out)
    }

    /// Writes a `rows,cols` header followed by one CSV line per row.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{},{}", self.theta.rows(), self.theta.cols())?;
        for i in 0..self.theta.rows() {
            let row: Vec<String> = self.theta.row(i).iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty checkpoint".into()))??;
        let dims: Vec<usize> = header
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(e.to_string()))
            })
            .collect::<Result<_>>()?;
        let [rows, cols] = dims[..] else {
            return Err(Error::Parse(format!("bad checkpoint header '{header}'")));
        };
        let mut values = Vec::with_capacity(rows * cols);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for v in line.split(',') {
                values.push(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(e.to_string()))?,
                );
            }
        }
        Ok(Self {
            theta: Mat::from_vec(rows, cols, values)?,
        })
    }
}

/// `θ · x` for a single flattened window.
pub fn encode(params: &EncoderParams, x: &[f64]) -> Result<Vec<f64>> {
    params.theta.matvec(x)
}

/// Time-smoothed update knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    /// Window length `w ≥ 1`.
    pub window: usize,
    /// Decay `γ ∈ (0, 1]`.
    pub decay: f64,
    /// Step size `η > 0`.
    pub step: f64,
    /// Squared radius `Γ` of the feasible ball; also bounds each gradient.
    pub radius_sq: f64,
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("smoothing window must be >= 1".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        if !(self.step > 0.0) || !(self.radius_sq > 0.0) {
            return Err(Error::Config("step size and radius must be > 0".into()));
        }
        Ok(())
    }

    /// `W = Σ_{j<terms} γ^j`.
    pub fn normalizer(&self, terms: usize) -> f64 {
        decay_normalizer(self.decay, terms)
    }
}

pub fn decay_normalizer(decay: f64, terms: usize) -> f64 {
    (0..terms).map(|j| decay.powi(j as i32)).sum()
}

/// Ring of the most recent `window` projected gradients, newest last.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    window: usize,
    entries: VecDeque<(usize, Mat)>,
}

impl GradientBuffer {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            entries: VecDeque::with_capacity(window.max(1)),
        }
    }

    /// Appends the gradient for `round`; rounds must strictly increase.
    pub fn push(&mut self, round: usize, grad: Mat) -> Result<()> {
        if let Some((last, g)) = self.entries.back() {
            if round <= *last {
                return Err(Error::Config(format!(
                    "gradient rounds must increase ({round} after {last})"
                )));
            }
            if g.shape() != grad.shape() {
                return Err(Error::shape(
                    format!("{:?}", g.shape()),
                    format!("{:?}", grad.shape()),
                ));
            }
        }
        if self.entries.len() == self.window {
            self.entries.pop_front();
        }
        self.entries.push_back((round, grad));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rounds(&self) -> Vec<usize> {
        self.entries.iter().map(|(r, _)| *r).collect()
    }

    /// `(1/W) Σ_j γ^j g_{t−j}` over the buffered terms, newest first.
    pub fn smoothed(&self, decay: f64) -> Result<Mat> {
        let (_, newest) = self
            .entries
            .back()
            .ok_or_else(|| Error::Empty("gradient buffer".into()))?;
        let mut acc = Mat::zeros(newest.rows(), newest.cols());
        let mut weight = 1.0;
        for (_, g) in self.entries.iter().rev() {
            acc.add_scaled(weight, g)?;
            weight *= decay;
        }
        acc.scale(1.0 / decay_normalizer(decay, self.entries.len()));
        Ok(acc)
    }
}

/// `θ − η · smoothed(buffer)`. The result is not projected; see
/// [`EncoderParams::project`].
pub fn local_smoothed_update(
    params: &EncoderParams,
    buffer: &GradientBuffer,
    cfg: &SmoothingConfig,
) -> Result<EncoderParams> {
    let smoothed = buffer.smoothed(cfg.decay)?;
    let mut theta = params.theta.clone();
    theta.add_scaled(-cfg.step, &smoothed)?;
    Ok(EncoderParams { theta })
}

/// Projects a raw gradient onto the `radius_sq` ball.
pub fn project_gradient(mut grad: Mat, radius_sq: f64) -> Mat {
    project_in_place(grad.as_mut_slice(), radius_sq);
    grad
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adds `coef · ∂(f(a)ᵀf(b))/∂θ = coef · (θa bᵀ + θb aᵀ)` into `grad`.
fn add_bilinear_grad(grad: &mut Mat, coef: f64, fa: &[f64], a: &[f64], fb: &[f64], b: &[f64]) {
    for r in 0..grad.rows() {
        let row = grad.row_mut(r);
        axpy(coef * fa[r], b, row);
        axpy(coef * fb[r], a, row);
    }
}

/// Sigmoid contrastive loss for one anchor:
/// `−log σ(f(ref)ᵀf(pos)) − Σ_r log σ(−f(ref)ᵀf(neg_r))` and its gradient in θ.
pub fn contrastive_loss(
    params: &EncoderParams,
    x_ref: &[f64],
    x_pos: &[f64],
    negatives: &[Vec<f64>],
) -> Result<(f64, Mat)> {
    if negatives.is_empty() {
        return Err(Error::Empty("negative samples".into()));
    }
    let f_ref = encode(params, x_ref)?;
    let f_pos = encode(params, x_pos)?;
    let mut grad = Mat::zeros(params.embed_dim(), params.input_dim());

    let s_pos = dot(&f_ref, &f_pos);
    let mut loss = softplus(-s_pos);
    add_bilinear_grad(&mut grad, -sigmoid(-s_pos), &f_ref, x_ref, &f_pos, x_pos);

    for neg in negatives {
        let f_neg = encode(params, neg)?;
        let s_neg = dot(&f_ref, &f_neg);
        loss += softplus(s_neg);
        add_bilinear_grad(&mut grad, sigmoid(s_neg), &f_ref, x_ref, &f_neg, neg);
    }
    Ok((loss, grad))
}

/// Mean contrastive loss and gradient over a list of triplets.
pub fn contrastive_batch_loss(
    params: &EncoderParams,
    triplets: &[crate::datagen::Triplet],
) -> Result<(f64, Mat)> {
    if triplets.is_empty() {
        return Err(Error::Empty("triplet batch".into()));
    }
    let mut total = 0.0;
    let mut grad = Mat::zeros(params.embed_dim(), params.input_dim());
    for t in triplets {
        let (l, g) = contrastive_loss(params, &t.anchor, &t.positive, &t.negatives)?;
        total += l;
        grad.add_scaled(1.0, &g)?;
    }
    let n = triplets.len() as f64;
    grad.scale(1.0 / n);
    Ok((total / n, grad))
}

/// Empirical linear self-supervised objective and its exact gradient.
///
/// `x` is `n × D`; `noise_a` and `noise_b` are `n × d̂` draws of ξ and ξ′.
pub fn ssl_linear_loss(
    params: &EncoderParams,
    x: &Mat,
    noise_a: &Mat,
    noise_b: &Mat,
) -> Result<(f64, Mat)> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Empty("ssl batch".into()));
    }
    let k = params.embed_dim();
    if noise_a.shape() != (n, k) || noise_b.shape() != (n, k) {
        return Err(Error::shape(
            format!("({n}, {k}) noise"),
            format!("{:?}", noise_a.shape()),
        ));
    }
    let z = params.encode_batch(x)?;
    let mut data_term = 0.0;
    // coefficient matrix (2z + ξ + ξ′), n × d̂
    let mut coef = Mat::zeros(n, k);
    for i in 0..n {
        let (zi, a, b) = (z.row(i), noise_a.row(i), noise_b.row(i));
        for r in 0..k {
            data_term += (zi[r] + a[r]) * (zi[r] + b[r]);
            coef[(i, r)] = 2.0 * zi[r] + a[r] + b[r];
        }
    }
    let gram = params.theta.matmul(&params.theta.transpose())?;
    let loss = -data_term / n as f64 + 0.5 * gram.frobenius_sq();

    let mut grad = coef.transpose().matmul(x)?;
    grad.scale(-1.0 / n as f64);
    grad.add_scaled(2.0, &gram.matmul(&params.theta)?)?;
    Ok((loss, grad))
}

/// FedAvg: `Σ (n_k / n) θ_k`.
pub fn fedavg_aggregate(params: &[(&EncoderParams, f64)]) -> Result<EncoderParams> {
    let (first, _) = params
        .first()
        .ok_or_else(|| Error::Empty("aggregation inputs".into()))?;
    let shape = first.theta.shape();
    let total: f64 = params.iter().map(|(_, n)| *n).sum();
    if params.iter().any(|(_, n)| *n < 0.0) || !(total > 0.0) {
        return Err(Error::Config(
            "aggregation weights must be >= 0 with positive sum".into(),
        ));
    }
    let mut theta = Mat::zeros(shape.0, shape.1);
    for (p, n) in params {
        if p.theta.shape() != shape {
            return Err(Error::shape(
                format!("{shape:?}"),
                format!("{:?}", p.theta.shape()),
            ));
        }
        theta.add_scaled(n / total, &p.theta)?;
    }
    Ok(EncoderParams { theta })
}

/// Unweighted mean of client encoders.
pub fn global_mean(params: &[&EncoderParams]) -> Result<EncoderParams> {
    let weighted: Vec<(&EncoderParams, f64)> = params.iter().map(|p| (*p, 1.0)).collect();
    fedavg_aggregate(&weighted)
}
