//! Comparison schemes: snapshot clustering, memoryless aggregation over
//! snapshot or evolutionary clusters, and the loss-based self-assignment
//! schemes IFCA (hard) and FLSC (soft top-τ).

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::cluster_weighted_average;
use crate::error::{Error, Result};
use crate::evocluster::{affect_iterate, agglomerative, similarity_matrix, ClusterAssignment};
use crate::numerics::Mat;
use crate::taskmodel::{Dataset, TaskKind, TaskModelParams, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    Snapshot,
    ScMma,
    EcMma,
    Ifca,
    Flsc,
}

/// Clusters the current round's cosine matrix and averages members by `sizes`.
pub fn snapshot_cluster_round(
    params: &[Vec<f64>],
    c: usize,
    sizes: &[f64],
) -> Result<(ClusterAssignment, Vec<Vec<f64>>)> {
    let w = similarity_matrix(params)?;
    let assignment = agglomerative(&w, c)?;
    let models = average_by_cluster(params, sizes, &assignment)?;
    Ok((assignment, models))
}

/// Memoryless aggregation over snapshot clusters.
pub fn sc_mma_round(
    params: &[Vec<f64>],
    c: usize,
    sizes: &[f64],
) -> Result<(ClusterAssignment, Vec<Vec<f64>>)> {
    snapshot_cluster_round(params, c, sizes)
}

/// Memoryless aggregation over evolutionary clusters. Returns the new
/// smoothed similarity and forgetting factor alongside the models.
pub fn ec_mma_round(
    psi_prev: &Mat,
    params: &[Vec<f64>],
    c: usize,
    sizes: &[f64],
    max_iters: usize,
) -> Result<(Mat, f64, ClusterAssignment, Vec<Vec<f64>>)> {
    let w = similarity_matrix(params)?;
    let (psi, a, assignment) = affect_iterate(psi_prev, &w, c, max_iters)?;
    let models = average_by_cluster(params, sizes, &assignment)?;
    Ok((psi, a, assignment, models))
}

/// Size-weighted average of each cluster's members.
pub fn average_by_cluster(
    params: &[Vec<f64>],
    sizes: &[f64],
    assignment: &ClusterAssignment,
) -> Result<Vec<Vec<f64>>> {
    if params.len() != sizes.len() || params.len() != assignment.len() {
        return Err(Error::shape(params.len(), sizes.len()));
    }
    assignment
        .members()
        .iter()
        .map(|m| {
            let members: Vec<(&[f64], f64)> = m
                .iter()
                .map(|&i| (params[i].as_slice(), sizes[i]))
                .collect();
            cluster_weighted_average(&members)
        })
        .collect()
}

/// Independent `N(0, 0.01²)` initial cluster models.
pub fn init_cluster_models(
    c: usize,
    outputs: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TaskModelParams> {
    let n = Normal::new(0.0, 0.01).expect("valid normal");
    (0..c)
        .map(|_| {
            let flat: Vec<f64> = (0..outputs * (dim + 1)).map(|_| n.sample(rng)).collect();
            TaskModelParams::from_flat(&flat, outputs, dim).expect("consistent shape")
        })
        .collect()
}

/// Outcome of one loss-based self-assignment round.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAssignRound {
    pub models: Vec<TaskModelParams>,
    /// Per participant, selected clusters in increasing-loss order.
    pub selections: Vec<Vec<usize>>,
}

impl SelfAssignRound {
    /// Lowest-loss cluster per participant.
    pub fn hard_assignment(&self) -> Vec<usize> {
        self.selections.iter().map(|s| s[0]).collect()
    }
}

/// The `tau` lowest-loss cluster ids for `data`; ties go to the lower id.
pub fn select_clusters(
    kind: TaskKind,
    models: &[TaskModelParams],
    data: &Dataset,
    tau: usize,
) -> Result<Vec<usize>> {
    let mut losses = models
        .iter()
        .enumerate()
        .map(|(c, m)| Ok((kind.loss(m, data)?, c)))
        .collect::<Result<Vec<_>>>()?;
    losses.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(losses.into_iter().take(tau).map(|(_, c)| c).collect())
}

/// One FLSC round: each client trains the uniform mixture of its `tau`
/// lowest-loss models, and its update is averaged into every selected
/// cluster by batch size. Clusters nobody selects keep their model.
///
/// `rng_for(i)` supplies the training stream of participant `i`.
pub fn flsc_round<F>(
    kind: TaskKind,
    models: &[TaskModelParams],
    clients: &[Dataset],
    tau: usize,
    cfg: &TrainConfig,
    rng_for: F,
) -> Result<SelfAssignRound>
where
    F: Fn(usize) -> ChaCha8Rng + Sync,
{
    let c = models.len();
    if tau == 0 || tau > c {
        return Err(Error::Config(format!("tau {tau} outside [1, {c}]")));
    }
    let (outputs, dim) = (models[0].outputs(), models[0].dim());
    let updates = clients
        .par_iter()
        .enumerate()
        .map(|(i, data)| {
            let sel = select_clusters(kind, models, data, tau)?;
            let flats: Vec<Vec<f64>> = sel.iter().map(|&s| models[s].vectorize()).collect();
            let mix: Vec<(&[f64], f64)> = flats.iter().map(|f| (f.as_slice(), 1.0)).collect();
            let start = TaskModelParams::from_flat(&cluster_weighted_average(&mix)?, outputs, dim)?;
            let trained = kind.train(&start, data, cfg, &mut rng_for(i))?;
            Ok((sel, trained.vectorize()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut next = Vec::with_capacity(c);
    for (cl, model) in models.iter().enumerate() {
        let members: Vec<(&[f64], f64)> = updates
            .iter()
            .zip(clients)
            .filter(|((sel, _), _)| sel.contains(&cl))
            .map(|((_, v), d)| (v.as_slice(), d.len() as f64))
            .collect();
        if members.is_empty() {
            next.push(model.clone());
        } else {
            next.push(TaskModelParams::from_flat(
                &cluster_weighted_average(&members)?,
                outputs,
                dim,
            )?);
        }
    }
    Ok(SelfAssignRound {
        models: next,
        selections: updates.into_iter().map(|(s, _)| s).collect(),
    })
}

/// One IFCA round: hard assignment to the lowest-loss model.
pub fn ifca_round<F>(
    kind: TaskKind,
    models: &[TaskModelParams],
    clients: &[Dataset],
    cfg: &TrainConfig,
    rng_for: F,
) -> Result<SelfAssignRound>
where
    F: Fn(usize) -> ChaCha8Rng + Sync,
{
    flsc_round(kind, models, clients, 1, cfg, rng_for)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::rand_score;
    use crate::numerics::{Purpose, RngStream};
    use rand_distr::StandardNormal;

    fn stream(seed: u64, i: usize) -> ChaCha8Rng {
        RngStream::new(seed, i, 0, Purpose::TaskTrain).rng()
    }

    #[test]
    fn snapshot_examples() {
        let same = vec![vec![1.0, 2.0]; 4];
        let (_, models) = snapshot_cluster_round(&same, 2, &[1.0; 4]).unwrap();
        assert!(models.iter().all(|m| m == &vec![1.0, 2.0]));

        let groups = vec![
            vec![1.0, 0.0],
            vec![3.0, 0.0],
            vec![0.0, 2.0],
            vec![0.0, 4.0],
        ];
        let (asg, models) = snapshot_cluster_round(&groups, 2, &[1.0; 4]).unwrap();
        assert_eq!(asg.labels, vec![0, 0, 1, 1]);
        assert_eq!(models, vec![vec![2.0, 0.0], vec![0.0, 3.0]]);

        let (_, models) = snapshot_cluster_round(&groups, 4, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(models, groups);
    }

    #[test]
    fn first_round_ec_equals_sc() {
        let mut rng = stream(1, 0);
        let params: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                (0..3)
                    .map(|j| {
                        if j == i % 3 {
                            5.0
                        } else {
                            StandardNormal.sample(&mut rng)
                        }
                    })
                    .collect()
            })
            .collect();
        let sizes = vec![1.0; 6];
        let (sc_asg, sc_models) = sc_mma_round(&params, 3, &sizes).unwrap();
        let (_, _, ec_asg, ec_models) =
            ec_mma_round(&Mat::zeros(6, 6), &params, 3, &sizes, 5).unwrap();
        assert_eq!(sc_asg, ec_asg);
        assert_eq!(sc_models, ec_models);
    }

    #[test]
    fn stationary_blocks_recovered_by_both() {
        let truth = [0, 1, 2, 0, 1, 2, 0, 1, 2];
        let params: Vec<Vec<f64>> = truth
            .iter()
            .map(|&c| (0..3).map(|j| if j == c { 1.0 } else { 0.1 }).collect())
            .collect();
        let sizes = vec![2.0; 9];
        let (sc, _) = sc_mma_round(&params, 3, &sizes).unwrap();
        let (psi, _, ec, _) = ec_mma_round(&Mat::zeros(9, 9), &params, 3, &sizes, 5).unwrap();
        let (_, _, ec2, _) = ec_mma_round(&psi, &params, 3, &sizes, 5).unwrap();
        for asg in [sc, ec, ec2] {
            assert_eq!(rand_score(&asg.labels, &truth).unwrap(), 1.0);
        }
    }

    /// Two clusters whose label rule is flipped, so one model cannot fit both.
    fn toy_clients(k: usize, clusters: usize, seed: u64) -> (Vec<Dataset>, Vec<usize>) {
        let mut rng = stream(seed, 999);
        let truth: Vec<usize> = (0..k).map(|i| i % clusters).collect();
        let data = truth
            .iter()
            .map(|&c| {
                let n = 100;
                let features = Mat::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
                let labels = (0..n)
                    .map(|i| {
                        let (x, y) = (features[(i, 0)], features[(i, 1)]);
                        let s = match c {
                            0 => x,
                            1 => -x,
                            _ => y,
                        };
                        usize::from(s > 0.0)
                    })
                    .collect();
                Dataset {
                    features,
                    labels,
                    targets: vec![0.0; n],
                }
            })
            .collect();
        (data, truth)
    }

    #[test]
    fn single_cluster_ifca_is_fedavg() {
        let (clients, _) = toy_clients(4, 2, 3);
        let kind = TaskKind::Classification;
        let cfg = TrainConfig {
            steps: 20,
            ..TrainConfig::default()
        };
        let init = init_cluster_models(1, 2, 2, &mut stream(3, 0));
        let out = ifca_round(kind, &init, &clients, &cfg, |i| stream(4, i)).unwrap();
        let locals: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                kind.train(&init[0], &clients[i], &cfg, &mut stream(4, i))
                    .unwrap()
                    .vectorize()
            })
            .collect();
        let members: Vec<(&[f64], f64)> = locals.iter().map(|v| (v.as_slice(), 100.0)).collect();
        assert_eq!(
            out.models[0].vectorize(),
            cluster_weighted_average(&members).unwrap()
        );
    }

    #[test]
    fn zero_loss_model_is_chosen() {
        let (clients, _) = toy_clients(2, 2, 5);
        let kind = TaskKind::Classification;
        // big-margin model for cluster 0's rule (class 1 iff x > 0)
        let perfect =
            TaskModelParams::from_flat(&[-100.0, 0.0, 100.0, 0.0, 0.0, 0.0], 2, 2).unwrap();
        let models = vec![TaskModelParams::zeros(2, 2), perfect.clone(), perfect];
        let sel = select_clusters(kind, &models, &clients[0], 3).unwrap();
        assert_eq!(sel[0], 1);
        // tie between the two identical models goes to the lower id
        assert_eq!(sel[1], 2);
    }

    #[test]
    fn ifca_separates_two_cluster_toy() {
        let kind = TaskKind::Classification;
        let cfg = TrainConfig {
            steps: 50,
            batch: 10,
            step_size: 0.1,
            reg: 1e-3,
        };
        let mut wins = 0;
        for seed in 0..5u64 {
            let (clients, truth) = toy_clients(10, 2, 100 + seed);
            let mut models = init_cluster_models(2, 2, 2, &mut stream(seed, 0));
            let mut rand = 0.0;
            for round in 0..20 {
                let out = ifca_round(kind, &models, &clients, &cfg, |i| {
                    RngStream::new(seed, i, round, Purpose::TaskTrain).rng()
                })
                .unwrap();
                rand = rand_score(&out.hard_assignment(), &truth).unwrap();
                models = out.models;
            }
            if rand == 1.0 {
                wins += 1;
            }
        }
        assert!(wins >= 4, "{wins}/5");
    }

    #[test]
    fn flsc_reductions() {
        let (clients, _) = toy_clients(6, 3, 7);
        let kind = TaskKind::Classification;
        let cfg = TrainConfig {
            steps: 30,
            ..TrainConfig::default()
        };
        let init = init_cluster_models(3, 2, 2, &mut stream(7, 0));
        let a = ifca_round(kind, &init, &clients, &cfg, |i| stream(8, i)).unwrap();
        let b = flsc_round(kind, &init, &clients, 1, &cfg, |i| stream(8, i)).unwrap();
        assert_eq!(a, b);

        let full = flsc_round(kind, &init, &clients, 3, &cfg, |i| stream(8, i)).unwrap();
        assert!(full.models.windows(2).all(|p| p[0] == p[1]));
        assert!(flsc_round(kind, &init, &clients, 4, &cfg, |i| stream(8, i)).is_err());
    }

    #[test]
    fn flsc_soft_assignment_recovers_three_clusters() {
        let kind = TaskKind::Classification;
        let cfg = TrainConfig {
            steps: 200,
            batch: 10,
            step_size: 0.5,
            reg: 1e-4,
        };
        let (clients, truth) = toy_clients(12, 3, 11);
        let mut models = init_cluster_models(3, 2, 2, &mut stream(11, 0));
        let mut rand = 0.0;
        for round in 0..30 {
            let out = flsc_round(kind, &models, &clients, 2, &cfg, |i| {
                RngStream::new(11, i, round, Purpose::TaskTrain).rng()
            })
            .unwrap();
            rand = rand_score(&out.hard_assignment(), &truth).unwrap();
            models = out.models;
        }
        assert!(rand >= 0.9, "rand {rand}");
    }
}
