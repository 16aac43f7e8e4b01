//! Experiment configuration: a flat TOML file with kebab-case keys.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{Strategy, WorldConfig};
use crate::error::{Error, Result};
use crate::taskmodel::{TaskKind, TrainConfig};

/// Phase-2 aggregation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    FedreactA1,
    FedreactA2,
    ScMma,
    EcMma,
    Snapshot,
    Ifca,
    Flsc,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::FedreactA1,
        Scheme::FedreactA2,
        Scheme::ScMma,
        Scheme::EcMma,
        Scheme::Snapshot,
        Scheme::Ifca,
        Scheme::Flsc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::FedreactA1 => "fedreact-a1",
            Scheme::FedreactA2 => "fedreact-a2",
            Scheme::ScMma => "sc-mma",
            Scheme::EcMma => "ec-mma",
            Scheme::Snapshot => "snapshot",
            Scheme::Ifca => "ifca",
            Scheme::Flsc => "flsc",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown scheme '{s}'")))
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Representation-learning objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderLoss {
    Contrastive,
    Ssl,
}

impl FromStr for EncoderLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "contrastive" => Ok(Self::Contrastive),
            "ssl" => Ok(Self::Ssl),
            other => Err(Error::Config(format!("unknown encoder loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Number of clients `K`.
    pub clients: usize,
    pub clusters_true: usize,
    /// Cluster count handed to the server; defaults to `clusters_true`.
    pub clusters_assumed: Option<usize>,
    pub strategy: Strategy,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Dirichlet concentration of the label partition.
    pub beta: f64,
    pub adopt_prob: f64,
    pub migrate_prob: f64,

    pub num_labels: usize,
    pub channels: usize,
    pub length: usize,
    pub latent_dim: usize,
    pub center_sep: f64,
    pub label_spread: f64,
    pub noise_scale: f64,

    pub embed_dim: usize,
    pub encoder_loss: EncoderLoss,
    /// Phase-1 rounds `T`.
    pub encoder_rounds: usize,
    pub triplets: usize,
    pub negatives: usize,
    /// Standard deviation of the augmentation noise in the linear objective.
    pub ssl_noise: f64,
    pub window: usize,
    pub decay: f64,
    /// Step size; derived from the warm-up batch when absent.
    pub step_size: Option<f64>,
    /// Squared feasible radius; derived from the warm-up batch when absent.
    pub radius_sq: Option<f64>,
    pub warmup_samples: usize,

    pub task: TaskKind,
    /// Phase-2 rounds `T_task`.
    pub task_rounds: usize,
    /// Local batch size `|M_t^k|`.
    pub batch_size: usize,
    pub test_size: usize,
    pub participation: f64,
    pub scheme: Scheme,
    pub task_steps: usize,
    pub task_batch: usize,
    pub task_step_size: f64,
    pub task_reg: f64,
    pub affect_iters: usize,
    pub flsc_tau: usize,
    /// Write the smoothed similarity of every round.
    pub similarity_snapshots: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            clients: 30,
            clusters_true: 3,
            clusters_assumed: None,
            strategy: world.strategy,
            lambda1: world.lambda1,
            lambda2: world.lambda2,
            beta: world.beta,
            adopt_prob: world.adopt_prob,
            migrate_prob: world.migrate_prob,
            num_labels: world.num_labels,
            channels: world.channels,
            length: world.length,
            latent_dim: world.latent_dim,
            center_sep: world.center_sep,
            label_spread: world.label_spread,
            noise_scale: world.noise_scale,
            embed_dim: 8,
            encoder_loss: EncoderLoss::Contrastive,
            encoder_rounds: 30,
            triplets: 32,
            negatives: 2,
            ssl_noise: 0.1,
            window: 5,
            decay: 0.9,
            step_size: None,
            radius_sq: None,
            warmup_samples: 256,
            task: TaskKind::Classification,
            task_rounds: 50,
            batch_size: 64,
            test_size: 256,
            participation: 1.0,
            scheme: Scheme::FedreactA1,
            task_steps: train.steps,
            task_batch: train.batch,
            task_step_size: train.step_size,
            task_reg: train.reg,
            affect_iters: 5,
            flsc_tau: 2,
            similarity_snapshots: false,
        }
    }
}

/// Named starting points for common experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 30 clients in 3 clusters under Markov label switching, with
    /// overlapping label mixes (Dirichlet concentration 1.5).
    Drift,
    /// Stationary clusters, one third of each cluster participating per
    /// round, concentration 1.75.
    Participation,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drift" => Ok(Self::Drift),
            "participation" => Ok(Self::Participation),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let base = Self {
            seed,
            clients: 30,
            clusters_true: 3,
            batch_size: 64,
            task_rounds: 50,
            ..Self::default()
        };
        match preset {
            Preset::Drift => Self {
                strategy: Strategy::MarkovSwitch,
                lambda1: 0.85,
                lambda2: 0.15,
                beta: 1.5,
                ..base
            },
            Preset::Participation => Self {
                strategy: Strategy::Stationary,
                beta: 1.75,
                participation: 1.0 / 3.0,
                ..base
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn clusters_assumed(&self) -> usize {
        self.clusters_assumed.unwrap_or(self.clusters_true)
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            num_labels: self.num_labels,
            num_clusters: self.clusters_true,
            channels: self.channels,
            length: self.length,
            latent_dim: self.latent_dim,
            center_sep: self.center_sep,
            label_spread: self.label_spread,
            noise_scale: self.noise_scale,
            beta: self.beta,
            strategy: self.strategy,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            adopt_prob: self.adopt_prob,
            migrate_prob: self.migrate_prob,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.task_steps,
            batch: self.task_batch,
            step_size: self.task_step_size,
            reg: self.task_reg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("clients", self.clients),
            ("clusters-true", self.clusters_true),
            ("num-labels", self.num_labels),
            ("channels", self.channels),
            ("length", self.length),
            ("latent-dim", self.latent_dim),
            ("embed-dim", self.embed_dim),
            ("triplets", self.triplets),
            ("negatives", self.negatives),
            ("window", self.window),
            ("warmup-samples", self.warmup_samples),
            ("task-rounds", self.task_rounds),
            ("batch-size", self.batch_size),
            ("test-size", self.test_size),
            ("task-batch", self.task_batch),
            ("affect-iters", self.affect_iters),
            ("flsc-tau", self.flsc_tau),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        let c = self.clusters_assumed();
        if c == 0 || c > self.clients {
            return bad(format!(
                "clusters-assumed {c} outside [1, {}]",
                self.clients
            ));
        }
        if self.clusters_true > self.clients {
            return bad("clusters-true exceeds clients".into());
        }
        if self.flsc_tau > c {
            return bad(format!(
                "flsc-tau {} exceeds cluster count {c}",
                self.flsc_tau
            ));
        }
        for (name, p) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("adopt-prob", self.adopt_prob),
            ("migrate-prob", self.migrate_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!(
                "participation {} outside (0, 1]",
                self.participation
            ));
        }
        if !(self.beta > 0.0) {
            return bad("beta must be > 0".into());
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay {} outside (0, 1]", self.decay));
        }
        for (name, v) in [
            ("center-sep", self.center_sep),
            ("label-spread", self.label_spread),
            ("noise-scale", self.noise_scale),
            ("ssl-noise", self.ssl_noise),
            ("task-reg", self.task_reg),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.task_step_size > 0.0) {
            return bad("task-step-size must be > 0".into());
        }
        for (name, v) in [("step-size", self.step_size), ("radius-sq", self.radius_sq)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return bad(format!("{name} must be finite and > 0"));
                }
            }
        }
        if self.num_labels < 2 {
            return bad("num-labels must be >= 2".into());
        }
        if matches!(
            self.strategy,
            Strategy::SimplexResample | Strategy::Migration
        ) && self.num_labels < self.clusters_true
        {
            return bad("s2/s3 need at least one label per cluster".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg =
            ExperimentConfig::from_toml_str("seed = 7\nscheme = \"sc-mma\"\nstrategy = \"s2\"\n")
                .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.scheme, Scheme::ScMma);
        assert_eq!(cfg.strategy, Strategy::SimplexResample);
        assert_eq!(cfg.clients, 30);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "lambda1 = 1.5",
            "participation = 0.0",
            "clusters-assumed = 40",
            "unknown-key = 1",
            "scheme = \"nope\"",
            "flsc-tau = 4",
        ] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }

    #[test]
    fn presets_validate() {
        for p in [Preset::Drift, Preset::Participation] {
            let cfg = ExperimentConfig::preset(p, 4);
            cfg.validate().unwrap();
            assert_eq!(cfg.seed, 4);
        }
        assert_eq!(
            "participation".parse::<Preset>().unwrap(),
            Preset::Participation
        );
    }

    #[test]
    fn scheme_names_parse() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert_eq!("FEDREACT_A1".parse::<Scheme>().unwrap(), Scheme::FedreactA1);
    }
}
