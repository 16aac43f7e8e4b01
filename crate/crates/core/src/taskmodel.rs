//! Linear task heads trained on encoded features.
//!
//! Classification uses one-vs-rest hinge-loss SVMs; regression a single
//! least-squares output. Both are trained by seeded minibatch SGD.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Mat};

/// `outputs × dim` weights plus one bias per output. Regression uses one output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskModelParams {
    pub weights: Mat,
    pub biases: Vec<f64>,
}

impl TaskModelParams {
    pub fn zeros(outputs: usize, dim: usize) -> Self {
        Self {
            weights: Mat::zeros(outputs, dim),
            biases: vec![0.0; outputs],
        }
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Length of [`vectorize`](Self::vectorize).
    pub fn flat_len(&self) -> usize {
        self.outputs() * (self.dim() + 1)
    }

    /// Row-major weights followed by biases.
    pub fn vectorize(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        v.extend_from_slice(self.weights.as_slice());
        v.extend_from_slice(&self.biases);
        v
    }

    pub fn from_flat(flat: &[f64], outputs: usize, dim: usize) -> Result<Self> {
        if flat.len() != outputs * (dim + 1) {
            return Err(Error::shape(outputs * (dim + 1), flat.len()));
        }
        let (w, b) = flat.split_at(outputs * dim);
        Ok(Self {
            weights: Mat::from_vec(outputs, dim, w.to_vec())?,
            biases: b.to_vec(),
        })
    }

    /// Raw scores `W z + b`.
    pub fn scores(&self, z: &[f64]) -> Vec<f64> {
        (0..self.outputs())
            .map(|c| dot(self.weights.row(c), z) + self.biases[c])
            .collect()
    }

    /// Argmax class; ties resolve to the lowest class id.
    pub fn predict_class(&self, z: &[f64]) -> usize {
        let s = self.scores(z);
        let mut best = 0;
        for (c, &v) in s.iter().enumerate().skip(1) {
            if v > s[best] {
                best = c;
            }
        }
        best
    }

    /// Output 0 as a regression prediction.
    pub fn predict_value(&self, z: &[f64]) -> f64 {
        dot(self.weights.row(0), z) + self.biases[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub step_size: f64,
    pub reg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 10,
            step_size: 0.3,
            reg: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.step_size > 0.0) || !(self.reg >= 0.0) {
            return Err(Error::Config(format!(
                "invalid task training config {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_data(params: &TaskModelParams, features: &Mat, n: usize) -> Result<()> {
    if features.rows() == 0 {
        return Err(Error::Empty("training set".into()));
    }
    if features.rows() != n {
        return Err(Error::shape(features.rows(), n));
    }
    if features.cols() != params.dim() {
        return Err(Error::shape(params.dim(), features.cols()));
    }
    Ok(())
}

fn check_labels(params: &TaskModelParams, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= params.outputs()) {
        return Err(Error::Config(format!(
            "label {bad} outside {} classes",
            params.outputs()
        )));
    }
    Ok(())
}

/// `Σ_c [mean_i max(0, 1 − y_ic(w_c·z_i + b_c)) + reg·‖w_c‖²]` over `idx`.
pub fn regularized_hinge_loss(
    params: &TaskModelParams,
    features: &Mat,
    labels: &[usize],
    idx: &[usize],
    reg: f64,
) -> f64 {
    let mut total = 0.0;
    for &i in idx {
        let s = params.scores(features.row(i));
        for (c, sc) in s.iter().enumerate() {
            let y = if labels[i] == c { 1.0 } else { -1.0 };
            total += (1.0 - y * sc).max(0.0);
        }
    }
    total / idx.len() as f64 + reg * params.weights.frobenius_sq()
}

/// One subgradient step of the one-vs-rest hinge objective on `idx`.
pub fn hinge_step(
    params: &mut TaskModelParams,
    features: &Mat,
    labels: &[usize],
    idx: &[usize],
    step_size: f64,
    reg: f64,
) {
    let (k, d) = (params.outputs(), params.dim());
    let mut gw = Mat::zeros(k, d);
    let mut gb = vec![0.0; k];
    let inv = 1.0 / idx.len() as f64;
    for &i in idx {
        let z = features.row(i);
        let s = params.scores(z);
        for c in 0..k {
            let y = if labels[i] == c { 1.0 } else { -1.0 };
            if y * s[c] < 1.0 {
                axpy(-y * inv, z, gw.row_mut(c));
                gb[c] -= y * inv;
            }
        }
    }
    for c in 0..k {
        let w = params.weights.row_mut(c);
        for (wj, gj) in w.iter_mut().zip(gw.row(c)) {
            *wj -= step_size * (gj + 2.0 * reg * *wj);
        }
        params.biases[c] -= step_size * gb[c];
    }
}

fn draw_batch<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Vec<usize> {
    (0..size).map(|_| rng.random_range(0..n)).collect()
}

/// Seeded minibatch SGD on the one-vs-rest hinge objective.
pub fn svm_train<R: Rng + ?Sized>(
    init: &TaskModelParams,
    features: &Mat,
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TaskModelParams> {
    check_data(init, features, labels.len())?;
    check_labels(init, labels)?;
    cfg.validate()?;
    let mut params = init.clone();
    for _ in 0..cfg.steps {
        let idx = draw_batch(labels.len(), cfg.batch, rng);
        hinge_step(&mut params, features, labels, &idx, cfg.step_size, cfg.reg);
    }
    Ok(params)
}

/// Seeded minibatch SGD on `½(w·z + b − y)²`, plus `reg·‖w‖²`.
pub fn linreg_train<R: Rng + ?Sized>(
    init: &TaskModelParams,
    features: &Mat,
    targets: &[f64],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TaskModelParams> {
    check_data(init, features, targets.len())?;
    cfg.validate()?;
    if init.outputs() != 1 {
        return Err(Error::shape(1, init.outputs()));
    }
    let mut params = init.clone();
    let d = params.dim();
    for _ in 0..cfg.steps {
        let idx = draw_batch(targets.len(), cfg.batch, rng);
        let inv = 1.0 / idx.len() as f64;
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for &i in &idx {
            let z = features.row(i);
            let r = params.predict_value(z) - targets[i];
            axpy(r * inv, z, &mut gw);
            gb += r * inv;
        }
        let w = params.weights.row_mut(0);
        for (wj, gj) in w.iter_mut().zip(&gw) {
            *wj -= cfg.step_size * (gj + 2.0 * cfg.reg * *wj);
        }
        params.biases[0] -= cfg.step_size * gb;
    }
    Ok(params)
}

/// Fraction of rows whose argmax class equals the label.
pub fn accuracy(params: &TaskModelParams, features: &Mat, labels: &[usize]) -> Result<f64> {
    check_data(params, features, labels.len())?;
    let correct = (0..labels.len())
        .filter(|&i| params.predict_class(features.row(i)) == labels[i])
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn rmse(params: &TaskModelParams, features: &Mat, targets: &[f64]) -> Result<f64> {
    check_data(params, features, targets.len())?;
    let sse: f64 = (0..targets.len())
        .map(|i| (params.predict_value(features.row(i)) - targets[i]).powi(2))
        .sum();
    Ok((sse / targets.len() as f64).sqrt())
}

/// Encoded features with both label kinds; only the one matching the task is read.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classification" => Ok(Self::Classification),
            "regression" => Ok(Self::Regression),
            other => Err(Error::Config(format!("unknown task kind '{other}'"))),
        }
    }
}

impl TaskKind {
    pub fn init(&self, num_classes: usize, dim: usize) -> TaskModelParams {
        match self {
            Self::Classification => TaskModelParams::zeros(num_classes, dim),
            Self::Regression => TaskModelParams::zeros(1, dim),
        }
    }

    pub fn train<R: Rng + ?Sized>(
        &self,
        init: &TaskModelParams,
        data: &Dataset,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<TaskModelParams> {
        match self {
            Self::Classification => svm_train(init, &data.features, &data.labels, cfg, rng),
            Self::Regression => linreg_train(init, &data.features, &data.targets, cfg, rng),
        }
    }

    /// Unregularized empirical loss: mean one-vs-rest hinge or mean squared error.
    pub fn loss(&self, params: &TaskModelParams, data: &Dataset) -> Result<f64> {
        match self {
            Self::Classification => {
                check_data(params, &data.features, data.labels.len())?;
                check_labels(params, &data.labels)?;
                let idx: Vec<usize> = (0..data.len()).collect();
                Ok(regularized_hinge_loss(
                    params,
                    &data.features,
                    &data.labels,
                    &idx,
                    0.0,
                ))
            }
            Self::Regression => Ok(rmse(params, &data.features, &data.targets)?.powi(2)),
        }
    }

    /// Accuracy for classification, RMSE for regression.
    pub fn score(&self, params: &TaskModelParams, data: &Dataset) -> Result<f64> {
        match self {
            Self::Classification => accuracy(params, &data.features, &data.labels),
            Self::Regression => rmse(params, &data.features, &data.targets),
        }
    }
}
