//! Evaluation: Rand score, cluster-averaged accuracy, windowed regret, and
//! communication counters, plus the per-round CSV log.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::encoder::decay_normalizer;
use crate::error::{Error, Result};
use crate::numerics::{norm_sq, Mat};
use crate::taskmodel::{Dataset, TaskKind, TaskModelParams};

/// Bytes per transmitted parameter.
pub const BYTES_PER_PARAM: u64 = 8;

/// `(TP + TN) / C(K, 2)` over unordered client pairs. Returns 1 for `K < 2`.
pub fn rand_score(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    let k = pred.len();
    if k < 2 {
        return Ok(1.0);
    }
    let mut agree = 0u64;
    for i in 0..k {
        for j in i + 1..k {
            if (pred[i] == pred[j]) == (truth[i] == truth[j]) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / (k * (k - 1) / 2) as f64)
}

/// `(1/K) Σ_k Acc(model[cluster_of[k]], test_k)`.
pub fn cluster_avg_accuracy(
    models: &[TaskModelParams],
    cluster_of: &[usize],
    tests: &[Dataset],
) -> Result<f64> {
    cluster_avg_metric(TaskKind::Classification, models, cluster_of, tests)
}

/// Mean over clients of their cluster model's score (accuracy or RMSE).
pub fn cluster_avg_metric(
    kind: TaskKind,
    models: &[TaskModelParams],
    cluster_of: &[usize],
    tests: &[Dataset],
) -> Result<f64> {
    if cluster_of.is_empty() {
        return Err(Error::Empty("client list".into()));
    }
    if cluster_of.len() != tests.len() {
        return Err(Error::shape(cluster_of.len(), tests.len()));
    }
    let mut total = 0.0;
    for (c, test) in cluster_of.iter().zip(tests) {
        let model = models
            .get(*c)
            .ok_or_else(|| Error::Config(format!("no model for cluster {c}")))?;
        total += kind.score(model, test)?;
    }
    Ok(total / cluster_of.len() as f64)
}

/// Local windowed regret `(1/W) Σ_j γ^j f_{t−j}` from newest-first losses.
pub fn local_regret(losses_newest_first: &[f64], window: usize, decay: f64) -> Result<f64> {
    let n = losses_newest_first.len().min(window);
    if n == 0 {
        return Err(Error::Empty("loss history".into()));
    }
    let mut acc = 0.0;
    let mut weight = 1.0;
    for f in &losses_newest_first[..n] {
        acc += weight * f;
        weight *= decay;
    }
    Ok(acc / decay_normalizer(decay, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTerms {
    pub local: Vec<f64>,
    pub global: f64,
    pub grad_sq: f64,
}

/// Per-client and global windowed regret, with `‖∇S‖²` taken from the
/// clients' smoothed gradients averaged across clients.
pub fn regret_terms(
    histories: &[Vec<f64>],
    smoothed_grads: &[Mat],
    window: usize,
    decay: f64,
) -> Result<RegretTerms> {
    if histories.is_empty() {
        return Err(Error::Empty("client histories".into()));
    }
    let local = histories
        .iter()
        .map(|h| local_regret(h, window, decay))
        .collect::<Result<Vec<_>>>()?;
    let global = local.iter().sum::<f64>() / local.len() as f64;
    Ok(RegretTerms {
        local,
        global,
        grad_sq: mean_grad_sq(smoothed_grads)?,
    })
}

/// `‖(1/K) Σ_k g_k‖²_F`.
pub fn mean_grad_sq(grads: &[Mat]) -> Result<f64> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Empty("gradient list".into()))?;
    let mut acc = Mat::zeros(first.rows(), first.cols());
    for g in grads {
        acc.add_scaled(1.0 / grads.len() as f64, g)?;
    }
    Ok(norm_sq(acc.as_slice()))
}

/// Accumulated upload and download byte counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCounter {
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl CommCounter {
    /// `clients` each send `models` parameter vectors of `params` entries.
    pub fn upload(&mut self, clients: usize, models: usize, params: usize) {
        self.bytes_up += (clients * models * params) as u64 * BYTES_PER_PARAM;
    }

    /// `clients` each receive `models` parameter vectors of `params` entries.
    pub fn download(&mut self, clients: usize, models: usize, params: usize) {
        self.bytes_down += (clients * models * params) as u64 * BYTES_PER_PARAM;
    }
}

/// One row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub rand_score: f64,
    /// Cluster-averaged accuracy (classification) or RMSE (regression).
    pub metric: f64,
    pub a_t: f64,
    pub participants: usize,
    pub cluster_sizes: Vec<usize>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub regret_grad_sq: Option<f64>,
}

pub const ROUND_LOG_HEADER: &str =
    "round,rand_score,metric,a_t,participants,cluster_sizes,bytes_up,bytes_down,regret_grad_sq";

impl RoundLog {
    pub fn validate(&self) -> Result<()> {
        let finite = self.rand_score.is_finite()
            && self.metric.is_finite()
            && self.a_t.is_finite()
            && self.regret_grad_sq.is_none_or(f64::is_finite);
        if !finite {
            return Err(Error::NonFinite(format!("round {} log", self.round)));
        }
        if !(0.0..=1.0).contains(&self.rand_score) {
            return Err(Error::Degenerate(format!("rand score {}", self.rand_score)));
        }
        Ok(())
    }

    pub fn csv_row(&self) -> String {
        let sizes: Vec<String> = self.cluster_sizes.iter().map(usize::to_string).collect();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            self.rand_score,
            self.metric,
            self.a_t,
            self.participants,
            sizes.join("|"),
            self.bytes_up,
            self.bytes_down,
            self.regret_grad_sq
                .map(|v| v.to_string())
                .unwrap_or_default()
        )
    }
}

pub fn write_round_logs<W: Write>(logs: &[RoundLog], out: &mut W) -> Result<()> {
    writeln!(out, "{ROUND_LOG_HEADER}")?;
    for log in logs {
        log.validate()?;
        writeln!(out, "{}", log.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Purpose, RngStream};
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    /// Independent oracle: enumerate all ordered pairs, count agreements.
    fn brute_rand(pred: &[usize], truth: &[usize]) -> f64 {
        let k = pred.len();
        let (mut tp, mut tn, mut tot) = (0, 0, 0);
        for i in 0..k {
            for j in 0..k {
                if i < j {
                    tot += 1;
                    let sp = pred[i] == pred[j];
                    let st = truth[i] == truth[j];
                    if sp && st {
                        tp += 1;
                    }
                    if !sp && !st {
                        tn += 1;
                    }
                }
            }
        }
        (tp + tn) as f64 / tot as f64
    }

    #[test]
    fn rand_examples() {
        assert_eq!(rand_score(&[0, 0, 1, 2], &[0, 0, 1, 2]).unwrap(), 1.0);
        assert!((rand_score(&[1, 1, 2], &[1, 2, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(rand_score(&[0, 1, 2], &[0, 0, 0]).unwrap(), 0.0);
        assert!(rand_score(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn rand_matches_pair_enumeration() {
        let mut rng = RngStream::new(31, 0, 0, Purpose::Misc).rng();
        for _ in 0..200 {
            let k = rng.random_range(2..=12);
            let cp = rng.random_range(1..=k);
            let ct = rng.random_range(1..=k);
            let p: Vec<usize> = (0..k).map(|_| rng.random_range(0..cp)).collect();
            let t: Vec<usize> = (0..k).map(|_| rng.random_range(0..ct)).collect();
            assert_eq!(rand_score(&p, &t).unwrap(), brute_rand(&p, &t));
        }
    }

    fn eye_test(n: usize, classes: usize) -> Dataset {
        Dataset {
            features: Mat::from_fn(n, classes, |i, j| if i % classes == j { 1.0 } else { 0.0 }),
            labels: (0..n).map(|i| i % classes).collect(),
            targets: vec![0.0; n],
        }
    }

    fn identity_model(classes: usize) -> TaskModelParams {
        TaskModelParams {
            weights: Mat::identity(classes),
            biases: vec![0.0; classes],
        }
    }

    #[test]
    fn cluster_accuracy_examples() {
        let good = identity_model(2);
        let bad = TaskModelParams::zeros(2, 2);
        let tests = vec![eye_test(4, 2), eye_test(4, 2)];
        assert_eq!(
            cluster_avg_accuracy(&[good.clone()], &[0, 0], &tests).unwrap(),
            1.0
        );
        // zero model predicts class 0: half right
        assert_eq!(
            cluster_avg_accuracy(&[good, bad], &[0, 1], &tests).unwrap(),
            0.75
        );
    }

    #[test]
    fn cluster_accuracy_matches_naive_loop() {
        let mut rng = RngStream::new(32, 0, 0, Purpose::Misc).rng();
        let (k, c, classes, dim) = (9, 3, 4, 3);
        let models: Vec<TaskModelParams> = (0..c)
            .map(|_| {
                let flat: Vec<f64> = (0..classes * (dim + 1))
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                TaskModelParams::from_flat(&flat, classes, dim).unwrap()
            })
            .collect();
        let cluster_of: Vec<usize> = (0..k).map(|_| rng.random_range(0..c)).collect();
        let tests: Vec<Dataset> = (0..k)
            .map(|_| Dataset {
                features: Mat::from_fn(7, dim, |_, _| rng.random_range(-1.0..1.0)),
                labels: (0..7).map(|_| rng.random_range(0..classes)).collect(),
                targets: vec![0.0; 7],
            })
            .collect();
        let got = cluster_avg_accuracy(&models, &cluster_of, &tests).unwrap();
        let mut oracle = 0.0;
        for cl in 0..c {
            for client in 0..k {
                if cluster_of[client] != cl {
                    continue;
                }
                let t = &tests[client];
                let mut correct = 0;
                for i in 0..t.labels.len() {
                    let s: Vec<f64> = (0..classes)
                        .map(|o| {
                            (0..dim)
                                .map(|j| models[cl].weights[(o, j)] * t.features[(i, j)])
                                .sum::<f64>()
                                + models[cl].biases[o]
                        })
                        .collect();
                    let mut best = 0;
                    for o in 1..classes {
                        if s[o] > s[best] {
                            best = o;
                        }
                    }
                    if best == t.labels[i] {
                        correct += 1;
                    }
                }
                oracle += correct as f64 / t.labels.len() as f64;
            }
        }
        assert!((got - oracle / k as f64).abs() < 1e-12);
    }

    #[test]
    fn regret_examples() {
        for (w, g) in [(1, 0.5), (3, 0.9), (5, 1.0)] {
            assert!((local_regret(&[2.5; 6], w, g).unwrap() - 2.5).abs() < 1e-15);
        }
        assert_eq!(local_regret(&[7.0, 1.0, 1.0], 1, 0.3).unwrap(), 7.0);
        assert!((local_regret(&[1.0, 2.0], 2, 0.5).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        // warm-up uses what is available
        assert_eq!(local_regret(&[3.0], 4, 0.5).unwrap(), 3.0);
        assert!(local_regret(&[], 4, 0.5).is_err());
    }

    #[test]
    fn regret_terms_average_clients() {
        let h = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let g = vec![
            Mat::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
            Mat::from_vec(1, 2, vec![0.0, 1.0]).unwrap(),
        ];
        let r = regret_terms(&h, &g, 1, 0.9).unwrap();
        assert_eq!(r.local, vec![1.0, 3.0]);
        assert_eq!(r.global, 2.0);
        assert!((r.grad_sq - 0.5).abs() < 1e-15);
    }

    #[test]
    fn comm_counter_examples() {
        let (k, c, p) = (30, 3, 90);
        let mut fed = CommCounter::default();
        fed.download(k, 1, p);
        assert_eq!(fed.bytes_down, (k * p * 8) as u64);
        let mut ifca = CommCounter::default();
        ifca.download(k, c, p);
        assert_eq!(ifca.bytes_down, 3 * fed.bytes_down);
        let mut third = CommCounter::default();
        third.download(k / 3, 1, p);
        assert_eq!(third.bytes_down * 3, fed.bytes_down);
    }

    #[test]
    fn round_log_csv() {
        let log = RoundLog {
            round: 3,
            rand_score: 0.5,
            metric: 0.75,
            a_t: 0.25,
            participants: 10,
            cluster_sizes: vec![3, 3, 4],
            bytes_up: 80,
            bytes_down: 160,
            regret_grad_sq: None,
        };
        let mut buf = Vec::new();
        write_round_logs(&[log.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "3,0.5,0.75,0.25,10,3|3|4,80,160,"
        );
        let bad = RoundLog {
            metric: f64::NAN,
            ..log
        };
        assert!(write_round_logs(&[bad], &mut Vec::new()).is_err());
    }

    proptest! {
        #[test]
        fn rand_is_symmetric_and_label_invariant(labels in proptest::collection::vec((0usize..4, 0usize..4), 2..12), shift in 1usize..5) {
            let p: Vec<usize> = labels.iter().map(|l| l.0).collect();
            let t: Vec<usize> = labels.iter().map(|l| l.1).collect();
            let r = rand_score(&p, &t).unwrap();
            prop_assert_eq!(r, rand_score(&t, &p).unwrap());
            let relabeled: Vec<usize> = p.iter().map(|l| (l + shift) % 4 + 10).collect();
            prop_assert_eq!(r, rand_score(&relabeled, &t).unwrap());
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn unit_decay_gives_trailing_mean(vals in proptest::collection::vec(-10.0f64..10.0, 1..20), w in 1usize..10) {
            let n = vals.len().min(w);
            let mean = vals[..n].iter().sum::<f64>() / n as f64;
            prop_assert!((local_regret(&vals, w, 1.0).unwrap() - mean).abs() < 1e-12);
        }
    }
}
