//! Experiment driver: phase 1, phase 2, summaries and output files.

pub mod config;
pub mod phase1;
pub mod phase2;
pub mod sweep;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::World;
use crate::error::{Error, Result};
use crate::evocluster::write_matrix_csv;
use crate::metrics::{write_round_logs, RoundLog};

pub use config::{EncoderLoss, ExperimentConfig, Preset, Scheme};
pub use phase1::{run_phase1, run_smoothed_federated, Phase1Output, Phase1Row};
pub use phase2::{run_phase2, sample_participants, Phase2Output, RoundTrace};
pub use sweep::{estimate_clusters, theorem1_sweep, SweepConfig, SweepData, SweepRow};

/// First round of the "settled" window used for the headline Rand score.
pub const SETTLED_FROM_ROUND: usize = 10;

/// Final metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scheme: Scheme,
    pub seed: u64,
    pub rounds: usize,
    /// Mean Rand score over rounds `10..=T` (all rounds if fewer).
    pub mean_rand_settled: f64,
    pub mean_rand_last_half: f64,
    pub final_rand: f64,
    /// Accuracy or RMSE averaged over all rounds.
    pub mean_metric: f64,
    pub final_metric: f64,
    pub mean_a_t: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl RunMetrics {
    pub fn from_logs(scheme: Scheme, seed: u64, logs: &[RoundLog]) -> Result<Self> {
        let last = logs
            .last()
            .ok_or_else(|| Error::Empty("round logs".into()))?;
        let settled: Vec<&RoundLog> = if logs.len() >= SETTLED_FROM_ROUND {
            logs.iter()
                .filter(|l| l.round >= SETTLED_FROM_ROUND)
                .collect()
        } else {
            logs.iter().collect()
        };
        let half = &logs[logs.len() / 2..];
        Ok(Self {
            scheme,
            seed,
            rounds: logs.len(),
            mean_rand_settled: mean(settled.iter().map(|l| l.rand_score)),
            mean_rand_last_half: mean(half.iter().map(|l| l.rand_score)),
            final_rand: last.rand_score,
            mean_metric: mean(logs.iter().map(|l| l.metric)),
            final_metric: last.metric,
            mean_a_t: mean(logs.iter().map(|l| l.a_t)),
            bytes_up: logs.iter().map(|l| l.bytes_up).sum(),
            bytes_down: logs.iter().map(|l| l.bytes_down).sum(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSummary {
    pub step_size: f64,
    pub radius_sq: f64,
    pub lambda_max: f64,
    pub feature_scale: f64,
    pub final_grad_sq: Option<f64>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub encoder: EncoderSummary,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub phase1: Phase1Output,
    pub phase2: Phase2Output,
    pub summary: Summary,
}

/// Runs `f` on a pool of `workers` threads, or on the global pool when 0.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn summarize(cfg: &ExperimentConfig, phase1: &Phase1Output, logs: &[RoundLog]) -> Result<Summary> {
    Ok(Summary {
        config: cfg.clone(),
        encoder: EncoderSummary {
            step_size: phase1.smoothing.step,
            radius_sq: phase1.smoothing.radius_sq,
            lambda_max: phase1.lambda_max,
            feature_scale: phase1.feature_scale,
            final_grad_sq: phase1.trace.last().map(|r| r.grad_sq),
        },
        metrics: RunMetrics::from_logs(cfg.scheme, cfg.seed, logs)?,
    })
}

/// Both phases for one configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let world = World::new(cfg.world(), cfg.clients, cfg.seed)?;
    let phase1 = run_phase1(cfg, &world)?;
    let phase2 = run_phase2(cfg, &world, &phase1)?;
    let summary = summarize(cfg, &phase1, &phase2.logs)?;
    Ok(ExperimentOutput {
        phase1,
        phase2,
        summary,
    })
}

/// Paired runs: every scheme sees the same world and encoder for a given seed.
/// Seeds are `cfg.seed, cfg.seed + 1, ...`.
pub fn compare(
    cfg: &ExperimentConfig,
    schemes: &[Scheme],
    seeds: usize,
) -> Result<Vec<RunMetrics>> {
    if schemes.is_empty() || seeds == 0 {
        return Err(Error::Config(
            "compare needs at least one scheme and one seed".into(),
        ));
    }
    let per_seed = (0..seeds as u64)
        .map(|s| {
            let base = ExperimentConfig {
                seed: cfg.seed + s,
                ..cfg.clone()
            };
            base.validate()?;
            let world = World::new(base.world(), base.clients, base.seed)?;
            let phase1 = run_phase1(&base, &world)?;
            schemes
                .par_iter()
                .map(|&scheme| {
                    let run = ExperimentConfig {
                        scheme,
                        ..base.clone()
                    };
                    let out = run_phase2(&run, &world, &phase1)?;
                    RunMetrics::from_logs(scheme, run.seed, &out.logs)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    // scheme-major order
    let mut rows = Vec::with_capacity(seeds * schemes.len());
    for j in 0..schemes.len() {
        for seed_rows in &per_seed {
            rows.push(seed_rows[j].clone());
        }
    }
    Ok(rows)
}

pub const COMPARE_HEADER: &str =
    "scheme,seed,mean_rand_settled,mean_rand_last_half,final_rand,mean_metric,final_metric,mean_a_t,bytes_up,bytes_down";

pub fn write_compare_csv<W: Write>(rows: &[RunMetrics], out: &mut W) -> Result<()> {
    writeln!(out, "{COMPARE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.scheme,
            r.seed,
            r.mean_rand_settled,
            r.mean_rand_last_half,
            r.final_rand,
            r.mean_metric,
            r.final_metric,
            r.mean_a_t,
            r.bytes_up,
            r.bytes_down
        )?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes `rounds.csv`, `summary.json`, `phase1.csv` and, if recorded,
/// `similarity_<t>.csv` into `dir`.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rounds = create(&dir.join("rounds.csv"))?;
    write_round_logs(&out.phase2.logs, &mut rounds)?;
    rounds.flush()?;

    let json =
        serde_json::to_string_pretty(&out.summary).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;

    let mut p1 = create(&dir.join("phase1.csv"))?;
    writeln!(p1, "{}", phase1::PHASE1_HEADER)?;
    for row in &out.phase1.trace {
        writeln!(p1, "{}", row.csv_row())?;
    }
    p1.flush()?;

    for (t, m) in &out.phase2.similarity {
        let mut f = create(&dir.join(format!("similarity_{t}.csv")))?;
        write_matrix_csv(m, &mut f)?;
        f.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(round: usize, rand: f64, metric: f64) -> RoundLog {
        RoundLog {
            round,
            rand_score: rand,
            metric,
            a_t: 0.5,
            participants: 3,
            cluster_sizes: vec![3],
            bytes_up: 10,
            bytes_down: 20,
            regret_grad_sq: None,
        }
    }

    #[test]
    fn run_metrics_windows() {
        let logs: Vec<RoundLog> = (1..=12)
            .map(|t| log(t, if t >= 10 { 1.0 } else { 0.0 }, t as f64))
            .collect();
        let m = RunMetrics::from_logs(Scheme::FedreactA1, 1, &logs).unwrap();
        assert_eq!(m.mean_rand_settled, 1.0);
        assert_eq!(m.mean_rand_last_half, 0.5);
        assert_eq!(m.final_rand, 1.0);
        assert_eq!(m.mean_metric, 6.5);
        assert_eq!(m.bytes_up, 120);
        assert_eq!(m.bytes_down, 240);

        let short: Vec<RoundLog> = (1..=4).map(|t| log(t, 0.5, 1.0)).collect();
        assert_eq!(
            RunMetrics::from_logs(Scheme::Ifca, 1, &short)
                .unwrap()
                .mean_rand_settled,
            0.5
        );
        assert!(RunMetrics::from_logs(Scheme::Ifca, 1, &[]).is_err());
    }

    #[test]
    fn compare_rows_are_paired_and_scheme_major() {
        let cfg = ExperimentConfig {
            clients: 6,
            encoder_rounds: 1,
            task_rounds: 2,
            batch_size: 8,
            test_size: 4,
            task_steps: 10,
            warmup_samples: 12,
            ..ExperimentConfig::default()
        };
        let rows = compare(&cfg, &[Scheme::FedreactA1, Scheme::ScMma], 2).unwrap();
        let keys: Vec<(Scheme, u64)> = rows.iter().map(|r| (r.scheme, r.seed)).collect();
        assert_eq!(
            keys,
            vec![
                (Scheme::FedreactA1, 0),
                (Scheme::FedreactA1, 1),
                (Scheme::ScMma, 0),
                (Scheme::ScMma, 1)
            ]
        );
        // paired: each row matches a standalone run of the same configuration
        let single = run_experiment(&ExperimentConfig {
            seed: 1,
            scheme: Scheme::ScMma,
            ..cfg
        })
        .unwrap();
        assert_eq!(rows[3], single.summary.metrics);
    }
}
