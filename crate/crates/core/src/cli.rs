//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datagen::{export_csv, Strategy, World};
use crate::error::{Error, Result};
use crate::orchestrator::{
    compare, estimate_clusters, run_experiment, theorem1_sweep, with_workers, write_compare_csv,
    write_outputs, EncoderLoss, ExperimentConfig, Preset, Scheme, SweepConfig, SweepData,
};
use crate::taskmodel::TaskKind;

const AFTER_HELP: &str = "\
Outputs of `run`:
  rounds.csv    round,rand_score,metric,a_t,participants,cluster_sizes,bytes_up,bytes_down,regret_grad_sq
                (metric is accuracy for classification, RMSE for regression;
                 cluster_sizes is '|'-separated; regret_grad_sq is empty in task rounds)
  phase1.csv    round,mean_loss,global_regret,grad_sq
  summary.json  effective config, encoder constants, final metrics
  similarity_<t>.csv  K x K smoothed similarity per round (with --similarity-snapshots)

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 1 i/o failure.";

#[derive(Debug, Parser)]
#[command(name = "fedreact", version, about = "Clustered federated learning simulator with drifting clients", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Export the synthetic client batches as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Rounds to export; defaults to task-rounds.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Run both phases for one scheme.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Average smoothed gradient norm across window sizes and decays.
    #[command(name = "sweep-theorem1")]
    SweepTheorem1(SweepArgs),
    /// Elbow and silhouette estimates of the cluster count.
    EstimateClusters {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        c_min: usize,
        #[arg(long, default_value_t = 8)]
        c_max: usize,
    },
    /// Paired runs of several schemes over consecutive seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated scheme names.
        #[arg(long, value_delimiter = ',', default_value = "fedreact-a1,sc-mma")]
        schemes: Vec<Scheme>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
}

/// Flags shared by the experiment subcommands.
#[derive(Debug, Args)]
pub struct Common {
    /// Named base configuration (drift, participation); defaults otherwise.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// TOML file with kebab-case keys; overrides the preset, flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads, 0 for all cores. Does not affect results.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// One flag per configuration key.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, visible_alias = "k")]
    pub clients: Option<usize>,
    #[arg(long, visible_alias = "c")]
    pub clusters_true: Option<usize>,
    #[arg(long)]
    pub clusters_assumed: Option<usize>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub adopt_prob: Option<f64>,
    #[arg(long)]
    pub migrate_prob: Option<f64>,
    #[arg(long)]
    pub num_labels: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub center_sep: Option<f64>,
    #[arg(long)]
    pub label_spread: Option<f64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub encoder_loss: Option<EncoderLoss>,
    #[arg(long)]
    pub encoder_rounds: Option<usize>,
    #[arg(long)]
    pub triplets: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub ssl_noise: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub radius_sq: Option<f64>,
    #[arg(long)]
    pub warmup_samples: Option<usize>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub task_rounds: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub participation: Option<f64>,
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub task_steps: Option<usize>,
    #[arg(long)]
    pub task_batch: Option<usize>,
    #[arg(long)]
    pub task_step_size: Option<f64>,
    #[arg(long)]
    pub task_reg: Option<f64>,
    #[arg(long)]
    pub affect_iters: Option<usize>,
    #[arg(long)]
    pub flsc_tau: Option<usize>,
    #[arg(long)]
    pub similarity_snapshots: bool,
}

macro_rules! apply_fields {
    ($src:expr, $dst:expr, [$($f:ident),*], [$($opt:ident),*]) => {
        $( if let Some(v) = $src.$f { $dst.$f = v; } )*
        $( if let Some(v) = $src.$opt { $dst.$opt = Some(v); } )*
    };
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        apply_fields!(
            self,
            cfg,
            [
                seed,
                clients,
                clusters_true,
                strategy,
                lambda1,
                lambda2,
                beta,
                adopt_prob,
                migrate_prob,
                num_labels,
                channels,
                length,
                latent_dim,
                center_sep,
                label_spread,
                noise_scale,
                embed_dim,
                encoder_loss,
                encoder_rounds,
                triplets,
                negatives,
                ssl_noise,
                window,
                decay,
                warmup_samples,
                task,
                task_rounds,
                batch_size,
                test_size,
                participation,
                scheme,
                task_steps,
                task_batch,
                task_step_size,
                task_reg,
                affect_iters,
                flsc_tau
            ],
            [clusters_assumed, step_size, radius_sq]
        );
        if self.similarity_snapshots {
            cfg.similarity_snapshots = true;
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// TOML file with sweep keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    pub windows: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.999")]
    pub decays: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub regimes: Option<usize>,
    #[arg(long)]
    pub switch_prob: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_parser = parse_sweep_data)]
    pub data: Option<SweepData>,
}

fn parse_sweep_data(s: &str) -> std::result::Result<SweepData, String> {
    match s {
        "drifting" => Ok(SweepData::Drifting),
        "static" => Ok(SweepData::Static),
        other => Err(format!("unknown sweep data '{other}' (drifting or static)")),
    }
}

impl SweepArgs {
    fn config(&self) -> Result<SweepConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Parse(e.to_string()))?
            }
            None => SweepConfig::default(),
        };
        let (s, c) = (self, &mut cfg);
        apply_fields!(
            s,
            c,
            [
                seed,
                clients,
                input_dim,
                embed_dim,
                rounds,
                batch,
                regimes,
                switch_prob,
                noise,
                data
            ],
            []
        );
        cfg.validate()?;
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::Config("windows must be positive".into()));
        }
        if self.decays.iter().any(|g| !(*g > 0.0 && *g <= 1.0)) {
            return Err(Error::Config("decays must lie in (0, 1]".into()));
        }
        Ok(cfg)
    }
}

/// Base configuration from the file (if any) with flag overrides applied.
pub fn effective_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, common.preset) {
        (Some(p), None) => ExperimentConfig::from_file(p)?,
        (Some(p), Some(preset)) => {
            // keys present in the file replace the preset's values
            let text = fs::read_to_string(p)?;
            let base = toml::to_string(&ExperimentConfig::preset(preset, 0))
                .map_err(|e| Error::Parse(e.to_string()))?;
            let mut table: toml::Table =
                toml::from_str(&base).map_err(|e| Error::Parse(e.to_string()))?;
            let file: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
            table.extend(file);
            ExperimentConfig::from_toml_str(
                &toml::to_string(&table).map_err(|e| Error::Parse(e.to_string()))?,
            )?
        }
        (None, Some(preset)) => ExperimentConfig::preset(preset, 0),
        (None, None) => ExperimentConfig::default(),
    };
    common.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Parse(e.to_string()))
}

/// Executes one parsed command.
pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, rounds } => {
            let cfg = effective_config(&common)?;
            fs::create_dir_all(&common.out)?;
            let world = World::new(cfg.world(), cfg.clients, cfg.seed)?;
            let path = common.out.join("data.csv");
            write_file(&path, |w| {
                export_csv(&world, rounds.unwrap_or(cfg.task_rounds), cfg.batch_size, w)
            })?;
            println!("wrote {}", path.display());
        }
        Command::Run { common } => {
            let cfg = effective_config(&common)?;
            let out = with_workers(common.workers, || run_experiment(&cfg))??;
            write_outputs(&out, &common.out)?;
            let m = &out.summary.metrics;
            println!(
                "{} seed {}: mean rand (t>=10) {:.4}, mean metric {:.4}, bytes up {} down {}",
                m.scheme, m.seed, m.mean_rand_settled, m.mean_metric, m.bytes_up, m.bytes_down
            );
        }
        Command::SweepTheorem1(args) => {
            let cfg = args.config()?;
            let rows = with_workers(args.workers, || {
                theorem1_sweep(&cfg, &args.windows, &args.decays)
            })??;
            fs::create_dir_all(&args.out)?;
            write_file(&args.out.join("sweep.csv"), |w| {
                writeln!(w, "{}", crate::orchestrator::sweep::SWEEP_HEADER)?;
                for r in &rows {
                    writeln!(w, "{}", r.csv_row())?;
                }
                Ok(())
            })?;
            for r in &rows {
                println!(
                    "w={:<3} gamma={:<6} avg |grad S|^2 = {:.6e}",
                    r.window, r.decay, r.avg_grad_sq
                );
            }
        }
        Command::EstimateClusters {
            common,
            c_min,
            c_max,
        } => {
            let cfg = effective_config(&common)?;
            if c_min == 0 || c_max < c_min + 2 || c_max > cfg.clients {
                return Err(Error::Config(format!(
                    "cluster range {c_min}..={c_max} needs three values within [1, clients]"
                )));
            }
            let range: Vec<usize> = (c_min..=c_max).collect();
            let est = with_workers(common.workers, || estimate_clusters(&cfg, &range))??;
            fs::create_dir_all(&common.out)?;
            write_file(&common.out.join("clusters.csv"), |w| {
                writeln!(w, "c,wcss,silhouette")?;
                for (c, wcss, sil) in &est.curves {
                    writeln!(w, "{c},{wcss},{sil}")?;
                }
                Ok(())
            })?;
            fs::write(common.out.join("clusters.json"), to_json(&est)?)?;
            println!("elbow: {}  silhouette: {}", est.elbow, est.silhouette);
        }
        Command::Compare {
            common,
            schemes,
            seeds,
        } => {
            let cfg = effective_config(&common)?;
            let rows = with_workers(common.workers, || compare(&cfg, &schemes, seeds))??;
            fs::create_dir_all(&common.out)?;
            write_file(&common.out.join("compare.csv"), |w| {
                write_compare_csv(&rows, w)
            })?;
            write_compare_csv(&rows, &mut io::stdout().lock())?;
        }
    }
    Ok(())
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        e if e.is_config() => 2,
        Error::Io(_) => 1,
        _ => 3,
    }
}

/// Parses `argv`, runs the command and returns the exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
