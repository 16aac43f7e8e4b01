//! Synthetic clustered, labelled multivariate time series.
//!
//! Every cluster owns one mean pattern per label. Patterns live in a shared
//! low-dimensional latent space (`latent_dim`) and are lifted to `d×T`
//! windows through a fixed random basis, so intra-cluster patterns sit closer
//! together than patterns of different clusters. Label mixtures evolve over
//! rounds according to one of four strategies:
//!
//! * `Stationary`: a fixed Dirichlet-partitioned mixture per cluster.
//! * `MarkovSwitch` (strategy 1): each cluster flips between a major and a
//!   minor mixture driven by a two-state Markov chain.
//! * `SimplexResample` (strategy 2): disjoint label supports, a fresh uniform
//!   simplex draw per cluster per round, and occasional one-round adoption of
//!   another cluster's support by individual clients.
//! * `Migration` (strategy 3): as strategy 2, plus permanent client migration.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat, Purpose, RngStream};

/// Probability vector over class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    /// Validates nonnegativity and unit mass (±1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("label distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(
                "label probabilities must be finite and >= 0".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "label probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative masses to a distribution.
    pub fn from_masses(masses: Vec<f64>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Degenerate(
                "label masses have no positive total".into(),
            ));
        }
        Self::new(masses.into_iter().map(|m| m / total).collect())
    }

    pub fn uniform(num_labels: usize) -> Self {
        Self {
            probs: vec![1.0 / num_labels as f64; num_labels],
        }
    }

    pub fn point_mass(num_labels: usize, label: usize) -> Self {
        let mut probs = vec![0.0; num_labels];
        probs[label] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_labels(&self) -> usize {
        self.probs.len()
    }

    /// Labels with positive probability.
    pub fn support(&self) -> Vec<usize> {
        (0..self.probs.len())
            .filter(|&l| self.probs[l] > 0.0)
            .collect()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (l, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = l;
            if u < acc {
                return l;
            }
        }
        last
    }
}

/// One symmetric Dirichlet(β) draw of length `n`.
///
/// Works in log space (`G = G' · U^{1/β}` with `G' ~ Gamma(β+1)`) so that very
/// small concentrations do not underflow every component to zero.
pub fn dirichlet_draw<R: Rng + ?Sized>(n: usize, beta: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Config(format!(
            "Dirichlet concentration must be > 0, got {beta}"
        )));
    }
    let gamma = Gamma::new(beta + 1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / beta
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Result of a Dirichlet label partition.
#[derive(Debug, Clone)]
pub struct DirichletPartition {
    /// `labels × clusters`; row `l` is how label `l`'s mass is split.
    pub allocation: Mat,
    pub distributions: Vec<LabelDistribution>,
}

/// Splits each label's (uniform) global mass across `num_clusters` clusters
/// with an independent Dirichlet(β) draw, then renormalizes per cluster.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    num_labels: usize,
    num_clusters: usize,
    beta: f64,
    rng: &mut R,
) -> Result<DirichletPartition> {
    if num_clusters == 0 || num_labels == 0 {
        return Err(Error::Config(
            "dirichlet partition needs >= 1 label and cluster".into(),
        ));
    }
    let mut allocation = Mat::zeros(num_labels, num_clusters);
    for l in 0..num_labels {
        let draw = dirichlet_draw(num_clusters, beta, rng)?;
        allocation.row_mut(l).copy_from_slice(&draw);
    }
    let global = 1.0 / num_labels as f64;
    let distributions = (0..num_clusters)
        .map(|c| {
            let masses: Vec<f64> = (0..num_labels)
                .map(|l| global * allocation[(l, c)])
                .collect();
            LabelDistribution::from_masses(masses)
                .or_else(|_| Ok::<_, Error>(LabelDistribution::uniform(num_labels)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DirichletPartition {
        allocation,
        distributions,
    })
}

/// Uniform draw from the probability simplex over `support`.
pub fn uniform_simplex<R: Rng + ?Sized>(
    num_labels: usize,
    support: &[usize],
    rng: &mut R,
) -> Result<LabelDistribution> {
    if support.is_empty() {
        return Err(Error::Empty("label support".into()));
    }
    let mut masses = vec![0.0; num_labels];
    for &l in support {
        let e: f64 = Exp1.sample(rng);
        masses[l] += e.max(f64::MIN_POSITIVE);
    }
    LabelDistribution::from_masses(masses)
}

/// Drift bookkeeping shared by the strategies.
#[derive(Debug, Clone)]
pub struct DriftState {
    /// Latent Markov bit per cluster.
    pub z: Vec<u8>,
    /// Current cluster of every client.
    pub client_cluster: Vec<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub adopt_prob: f64,
    pub migrate_prob: f64,
}

impl DriftState {
    pub fn new(
        num_clusters: usize,
        client_cluster: Vec<usize>,
        lambda1: f64,
        lambda2: f64,
        adopt_prob: f64,
        migrate_prob: f64,
    ) -> Result<Self> {
        for (name, p) in [
            ("lambda1", lambda1),
            ("lambda2", lambda2),
            ("adopt-prob", adopt_prob),
            ("migrate-prob", migrate_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(Self {
            z: vec![0; num_clusters],
            client_cluster,
            lambda1,
            lambda2,
            adopt_prob,
            migrate_prob,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.z.len()
    }
}

/// Advances cluster `c`'s latent bit: `Pr(1|0) = λ₁`, `Pr(1|1) = λ₂`.
/// Returns the mixture for the new state.
pub fn markov_step<'a, R: Rng + ?Sized>(
    state: &mut DriftState,
    c: usize,
    major: &'a LabelDistribution,
    minor: &'a LabelDistribution,
    rng: &mut R,
) -> &'a LabelDistribution {
    let p_one = if state.z[c] == 0 {
        state.lambda1
    } else {
        state.lambda2
    };
    let u: f64 = rng.random();
    state.z[c] = u8::from(u < p_one);
    if state.z[c] == 0 {
        major
    } else {
        minor
    }
}

/// With probability `1 − adopt_prob` a uniform simplex draw over `support`;
/// otherwise a uniform simplex draw over the support of a uniformly chosen
/// entry of `other_supports`.
pub fn simplex_resample<R: Rng + ?Sized>(
    num_labels: usize,
    support: &[usize],
    adopt_prob: f64,
    other_supports: &[&[usize]],
    rng: &mut R,
) -> Result<LabelDistribution> {
    if support.is_empty() {
        return Err(Error::Empty("label support".into()));
    }
    let u: f64 = rng.random();
    if u < adopt_prob && !other_supports.is_empty() {
        let pick = rng.random_range(0..other_supports.len());
        uniform_simplex(num_labels, other_supports[pick], rng)
    } else {
        uniform_simplex(num_labels, support, rng)
    }
}

/// With probability `migrate_prob` moves `client` permanently to a uniformly
/// chosen other cluster. Returns the client's (possibly new) cluster.
pub fn migrate_step<R: Rng + ?Sized>(
    state: &mut DriftState,
    client: usize,
    rng: &mut R,
) -> Result<usize> {
    let c = state.num_clusters();
    if c < 2 {
        return Err(Error::Config(
            "migration needs at least two clusters".into(),
        ));
    }
    let current = state.client_cluster[client];
    let u: f64 = rng.random();
    if u < state.migrate_prob {
        let mut target = rng.random_range(0..c - 1);
        if target >= current {
            target += 1;
        }
        state.client_cluster[client] = target;
    }
    Ok(state.client_cluster[client])
}

/// A cluster's generative description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub id: usize,
    /// Labels this cluster natively draws from.
    pub label_support: Vec<usize>,
    /// One flattened `d×T` mean pattern per label (all labels, not only the support).
    pub prototypes: Vec<Vec<f64>>,
    /// Regression target attached to each label.
    pub targets: Vec<f64>,
    pub noise_scale: f64,
}

/// A labelled batch; row `i` of `x` is a flattened `d×T` window.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Mat,
    pub labels: Vec<usize>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn noisy_pattern<R: Rng + ?Sized>(proto: &[f64], noise: f64, rng: &mut R) -> Vec<f64> {
    proto
        .iter()
        .map(|p| {
            if noise > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                p + noise * e
            } else {
                *p
            }
        })
        .collect()
}

/// Draws `size` labelled windows: label from `dist`, `x = prototype + noise`.
pub fn sample_batch<R: Rng + ?Sized>(
    spec: &ClusterSpec,
    dist: &LabelDistribution,
    size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if spec.prototypes.is_empty() || dist.support().is_empty() {
        return Err(Error::Empty(format!(
            "label support of cluster {}",
            spec.id
        )));
    }
    if dist.num_labels() > spec.prototypes.len() {
        return Err(Error::shape(spec.prototypes.len(), dist.num_labels()));
    }
    let dim = spec.prototypes[0].len();
    let mut values = Vec::with_capacity(size * dim);
    let mut labels = Vec::with_capacity(size);
    let mut targets = Vec::with_capacity(size);
    for _ in 0..size {
        let l = dist.sample(rng);
        values.extend(noisy_pattern(&spec.prototypes[l], spec.noise_scale, rng));
        labels.push(l);
        targets.push(spec.targets[l]);
    }
    Ok(Batch {
        x: Mat::from_vec(size, dim, values)?,
        labels,
        targets,
    })
}

/// Anchor/positive/negatives for the contrastive objective. The positive is
/// a fresh noisy draw of the anchor's pattern, negatives are draws of other
/// labels of the same cluster.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

pub fn sample_triplets<R: Rng + ?Sized>(
    spec: &ClusterSpec,
    dist: &LabelDistribution,
    count: usize,
    negatives: usize,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    let num_labels = spec.prototypes.len();
    if num_labels < 2 {
        return Err(Error::Config(
            "contrastive sampling needs >= 2 labels".into(),
        ));
    }
    (0..count)
        .map(|_| {
            let l = dist.sample(rng);
            let proto = &spec.prototypes[l];
            let anchor = noisy_pattern(proto, spec.noise_scale, rng);
            let positive = noisy_pattern(proto, spec.noise_scale, rng);
            let negs = (0..negatives)
                .map(|_| {
                    let mut other = rng.random_range(0..num_labels - 1);
                    if other >= l {
                        other += 1;
                    }
                    noisy_pattern(&spec.prototypes[other], spec.noise_scale, rng)
                })
                .collect();
            Ok(Triplet {
                anchor,
                positive,
                negatives: negs,
            })
        })
        .collect()
}

/// Non-stationarity protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Stationary,
    #[serde(rename = "s1")]
    MarkovSwitch,
    #[serde(rename = "s2")]
    SimplexResample,
    #[serde(rename = "s3")]
    Migration,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stationary" => Ok(Strategy::Stationary),
            "s1" | "markov" => Ok(Strategy::MarkovSwitch),
            "s2" | "simplex" => Ok(Strategy::SimplexResample),
            "s3" | "migration" => Ok(Strategy::Migration),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Stationary => "stationary",
            Strategy::MarkovSwitch => "s1",
            Strategy::SimplexResample => "s2",
            Strategy::Migration => "s3",
        })
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_labels: usize,
    pub num_clusters: usize,
    pub channels: usize,
    pub length: usize,
    pub latent_dim: usize,
    pub center_sep: f64,
    pub label_spread: f64,
    pub noise_scale: f64,
    pub beta: f64,
    pub strategy: Strategy,
    pub lambda1: f64,
    pub lambda2: f64,
    pub adopt_prob: f64,
    pub migrate_prob: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_labels: 10,
            num_clusters: 3,
            channels: 6,
            length: 20,
            latent_dim: 8,
            center_sep: 0.5,
            label_spread: 1.0,
            noise_scale: 0.5,
            beta: 0.1,
            strategy: Strategy::MarkovSwitch,
            lambda1: 0.85,
            lambda2: 0.15,
            adopt_prob: 0.05,
            migrate_prob: 0.005,
        }
    }
}

impl WorldConfig {
    pub fn input_dim(&self) -> usize {
        self.channels * self.length
    }
}

#[derive(Debug, Clone)]
enum Regimes {
    Stationary(Vec<LabelDistribution>),
    Markov {
        major: Vec<LabelDistribution>,
        minor: Vec<LabelDistribution>,
    },
    Simplex,
}

/// Per-round environment: where every client lives and what it samples from.
#[derive(Debug, Clone)]
pub struct RoundEnv {
    pub client_cluster: Vec<usize>,
    pub client_dist: Vec<LabelDistribution>,
}

/// Seeded synthetic population.
#[derive(Debug, Clone)]
pub struct World {
    pub cfg: WorldConfig,
    pub clusters: Vec<ClusterSpec>,
    pub initial_cluster: Vec<usize>,
    seed: u64,
    regimes: Regimes,
}

/// Splits `k` clients into `c` contiguous groups, larger groups last
/// (e.g. 100 → 33, 33, 34).
pub fn balanced_membership(k: usize, c: usize) -> Vec<usize> {
    let base = k / c;
    let extra = k % c;
    let mut out = Vec::with_capacity(k);
    for cluster in 0..c {
        let size = base + usize::from(cluster >= c - extra);
        out.extend(std::iter::repeat_n(cluster, size));
    }
    out
}

/// Disjoint, contiguous label supports with larger blocks last (10 → 3, 3, 4).
pub fn disjoint_supports(num_labels: usize, c: usize) -> Vec<Vec<usize>> {
    let owners = balanced_membership(num_labels, c);
    (0..c)
        .map(|cl| (0..num_labels).filter(|&l| owners[l] == cl).collect())
        .collect()
}

impl World {
    pub fn new(cfg: WorldConfig, num_clients: usize, seed: u64) -> Result<Self> {
        if cfg.num_clusters == 0 || num_clients < cfg.num_clusters {
            return Err(Error::Config(format!(
                "need at least one client per cluster ({} clients, {} clusters)",
                num_clients, cfg.num_clusters
            )));
        }
        if cfg.num_labels < 2 || cfg.channels == 0 || cfg.length == 0 || cfg.latent_dim == 0 {
            return Err(Error::Config(
                "labels >= 2 and positive shape parameters required".into(),
            ));
        }
        if matches!(
            cfg.strategy,
            Strategy::SimplexResample | Strategy::Migration
        ) && cfg.num_labels < cfg.num_clusters
        {
            return Err(Error::Config(
                "disjoint supports need labels >= clusters".into(),
            ));
        }
        if cfg.noise_scale < 0.0 || !cfg.noise_scale.is_finite() {
            return Err(Error::Config("noise scale must be >= 0".into()));
        }
        // validates the probabilities
        DriftState::new(
            cfg.num_clusters,
            vec![],
            cfg.lambda1,
            cfg.lambda2,
            cfg.adopt_prob,
            cfg.migrate_prob,
        )?;

        let dim = cfg.input_dim();
        let r = cfg.latent_dim;
        let mut rng = RngStream::new(seed, 0, 0, Purpose::Prototypes).rng();
        // rows of squared norm ≈ dim / r
        let basis_scale = 1.0 / (r as f64).sqrt();
        let basis = Mat::from_fn(r, dim, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e * basis_scale
        });
        let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

        let supports = match cfg.strategy {
            Strategy::SimplexResample | Strategy::Migration => {
                disjoint_supports(cfg.num_labels, cfg.num_clusters)
            }
            _ => vec![(0..cfg.num_labels).collect(); cfg.num_clusters],
        };
        // label codes are shared by every cluster; clusters differ by a
        // common shift of their codes and by their label distributions
        let label_codes: Vec<Vec<f64>> = (0..cfg.num_labels)
            .map(|_| (0..r).map(|_| cfg.label_spread * gauss(&mut rng)).collect())
            .collect();
        let mut clusters = Vec::with_capacity(cfg.num_clusters);
        for (c, support) in supports.into_iter().enumerate() {
            let center: Vec<f64> = (0..r).map(|_| cfg.center_sep * gauss(&mut rng)).collect();
            let mut prototypes = Vec::with_capacity(cfg.num_labels);
            let mut targets = Vec::with_capacity(cfg.num_labels);
            for label_code in &label_codes {
                let code: Vec<f64> = center.iter().zip(label_code).map(|(m, l)| m + l).collect();
                prototypes.push(basis.transpose().matvec(&code)?);
                targets.push(gauss(&mut rng));
            }
            clusters.push(ClusterSpec {
                id: c,
                label_support: support,
                prototypes,
                targets,
                noise_scale: cfg.noise_scale,
            });
        }

        let mut prng = RngStream::new(seed, 0, 0, Purpose::Partition).rng();
        let regimes = match cfg.strategy {
            Strategy::Stationary => Regimes::Stationary(
                dirichlet_partition(cfg.num_labels, cfg.num_clusters, cfg.beta, &mut prng)?
                    .distributions,
            ),
            Strategy::MarkovSwitch => {
                let major =
                    dirichlet_partition(cfg.num_labels, cfg.num_clusters, cfg.beta, &mut prng)?
                        .distributions;
                let minor =
                    dirichlet_partition(cfg.num_labels, cfg.num_clusters, cfg.beta, &mut prng)?
                        .distributions;
                Regimes::Markov { major, minor }
            }
            Strategy::SimplexResample | Strategy::Migration => Regimes::Simplex,
        };
        // overlapping strategies draw from the Dirichlet support only
        if let Regimes::Stationary(d) = &regimes {
            for (spec, dist) in clusters.iter_mut().zip(d) {
                spec.label_support = dist.support();
            }
        }

        Ok(Self {
            initial_cluster: balanced_membership(num_clients, cfg.num_clusters),
            cfg,
            clusters,
            seed,
            regimes,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.initial_cluster.len()
    }

    pub fn input_dim(&self) -> usize {
        self.cfg.input_dim()
    }

    /// Environment for rounds `1..=rounds`. `round_base` offsets the stream
    /// keys so that independent phases see independent drift.
    pub fn schedule(&self, rounds: usize, round_base: usize) -> Result<Vec<RoundEnv>> {
        let cfg = &self.cfg;
        let c = cfg.num_clusters;
        let k = self.num_clients();
        let mut state = DriftState::new(
            c,
            self.initial_cluster.clone(),
            cfg.lambda1,
            cfg.lambda2,
            cfg.adopt_prob,
            cfg.migrate_prob,
        )?;
        let supports: Vec<Vec<usize>> = self
            .clusters
            .iter()
            .map(|s| s.label_support.clone())
            .collect();
        let mut out = Vec::with_capacity(rounds);
        for t in 1..=rounds {
            let key = round_base + t;
            let cluster_dist: Vec<LabelDistribution> = match &self.regimes {
                Regimes::Stationary(d) => d.clone(),
                Regimes::Markov { major, minor } => (0..c)
                    .map(|cl| {
                        let mut rng = RngStream::new(self.seed, cl, key, Purpose::Drift).rng();
                        markov_step(&mut state, cl, &major[cl], &minor[cl], &mut rng).clone()
                    })
                    .collect(),
                Regimes::Simplex => (0..c)
                    .map(|cl| {
                        let mut rng = RngStream::new(self.seed, cl, key, Purpose::Drift).rng();
                        simplex_resample(cfg.num_labels, &supports[cl], 0.0, &[], &mut rng)
                    })
                    .collect::<Result<_>>()?,
            };
            if cfg.strategy == Strategy::Migration && c >= 2 {
                for client in 0..k {
                    let mut rng = RngStream::new(self.seed, client, key, Purpose::Migration).rng();
                    migrate_step(&mut state, client, &mut rng)?;
                }
            }
            let mut client_dist = Vec::with_capacity(k);
            for client in 0..k {
                let home = state.client_cluster[client];
                let dist = match self.regimes {
                    Regimes::Simplex if c >= 2 => {
                        let mut rng =
                            RngStream::new(self.seed, client, key, Purpose::Adoption).rng();
                        let u: f64 = rng.random();
                        if u < cfg.adopt_prob {
                            let others: Vec<&[usize]> = (0..c)
                                .filter(|&o| o != home)
                                .map(|o| supports[o].as_slice())
                                .collect();
                            simplex_resample(
                                cfg.num_labels,
                                &supports[home],
                                1.0,
                                &others,
                                &mut rng,
                            )?
                        } else {
                            cluster_dist[home].clone()
                        }
                    }
                    _ => cluster_dist[home].clone(),
                };
                client_dist.push(dist);
            }
            out.push(RoundEnv {
                client_cluster: state.client_cluster.clone(),
                client_dist,
            });
        }
        Ok(out)
    }

    /// Batch for `client` in environment `env` using stream `purpose`.
    pub fn client_batch(
        &self,
        env: &RoundEnv,
        client: usize,
        round_key: usize,
        size: usize,
        purpose: Purpose,
    ) -> Result<Batch> {
        let cluster = env.client_cluster[client];
        let mut rng = RngStream::new(self.seed, client, round_key, purpose).rng();
        sample_batch(
            &self.clusters[cluster],
            &env.client_dist[client],
            size,
            &mut rng,
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Writes `rounds` of per-client batches as CSV: `x0..x{D-1},label,client,round`.
pub fn export_csv<W: Write>(
    world: &World,
    rounds: usize,
    batch_size: usize,
    out: &mut W,
) -> Result<()> {
    let dim = world.input_dim();
    let header: Vec<String> = (0..dim)
        .map(|i| format!("x{i}"))
        .chain(["label".into(), "client".into(), "round".into()])
        .collect();
    writeln!(out, "{}", header.join(","))?;
    let schedule = world.schedule(rounds, 0)?;
    for (t, env) in schedule.iter().enumerate() {
        for client in 0..world.num_clients() {
            let batch = world.client_batch(env, client, t + 1, batch_size, Purpose::Export)?;
            for i in 0..batch.len() {
                let row: Vec<String> = batch.x.row(i).iter().map(|v| format!("{v}")).collect();
                writeln!(
                    out,
                    "{},{},{},{}",
                    row.join(","),
                    batch.labels[i],
                    client,
                    t + 1
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(tag: usize) -> ChaCha8Rng {
        RngStream::new(99, tag, 0, Purpose::Misc).rng()
    }

    fn dist_ok(d: &LabelDistribution) -> bool {
        d.probs().iter().all(|p| *p >= 0.0) && (d.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9
    }

    #[test]
    fn single_cluster_partition_is_global_frequency() {
        let p = dirichlet_partition(10, 1, 0.1, &mut rng(0)).unwrap();
        for v in p.distributions[0].probs() {
            assert!((v - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_concentration_allocates_evenly() {
        let p = dirichlet_partition(10, 3, 1e6, &mut rng(1)).unwrap();
        let dev = p
            .allocation
            .as_slice()
            .iter()
            .map(|a| (a - 1.0 / 3.0).abs())
            .fold(0.0, f64::max);
        assert!(dev < 0.01, "max deviation {dev}");
    }

    #[test]
    fn small_concentration_skews_clusters() {
        let uniform = (10f64).ln();
        for seed in 0..20 {
            let p = dirichlet_partition(10, 3, 0.1, &mut rng(100 + seed)).unwrap();
            for d in &p.distributions {
                assert!(dist_ok(d));
                assert!(d.entropy() < uniform);
            }
        }
    }

    #[test]
    fn markov_forced_and_absorbing() {
        let major = LabelDistribution::point_mass(3, 0);
        let minor = LabelDistribution::point_mass(3, 2);
        let mut s = DriftState::new(1, vec![0], 1.0, 0.0, 0.0, 0.0).unwrap();
        let d = markov_step(&mut s, 0, &major, &minor, &mut rng(2));
        assert_eq!(s.z[0], 1);
        assert_eq!(d, &minor);

        let mut s = DriftState::new(1, vec![0], 0.0, 1.0, 0.0, 0.0).unwrap();
        s.z[0] = 1;
        let mut r = rng(3);
        for _ in 0..1000 {
            markov_step(&mut s, 0, &major, &minor, &mut r);
            assert_eq!(s.z[0], 1);
        }
    }

    #[test]
    fn markov_occupancy_matches_stationary_distribution() {
        let major = LabelDistribution::uniform(2);
        let minor = LabelDistribution::uniform(2);
        let mut s = DriftState::new(1, vec![0], 0.85, 0.15, 0.0, 0.0).unwrap();
        let mut r = rng(4);
        let steps = 100_000;
        let ones: usize = (0..steps)
            .map(|_| {
                markov_step(&mut s, 0, &major, &minor, &mut r);
                s.z[0] as usize
            })
            .sum();
        // π₁ = λ₁ / (λ₁ + 1 − λ₂)
        let expected = 0.85 / (0.85 + 1.0 - 0.15);
        let frac = ones as f64 / steps as f64;
        assert!((frac - expected).abs() < 0.02, "{frac} vs {expected}");
    }

    #[test]
    fn simplex_examples() {
        let d = simplex_resample(5, &[3], 0.0, &[], &mut rng(5)).unwrap();
        assert_eq!(d, LabelDistribution::point_mass(5, 3));

        let mut r = rng(6);
        let others: [&[usize]; 1] = [&[0, 1]];
        for _ in 0..500 {
            let d = simplex_resample(5, &[2, 3, 4], 0.0, &others, &mut r).unwrap();
            assert!(dist_ok(&d));
            assert!(d.support().iter().all(|l| [2, 3, 4].contains(l)));
        }

        let n = 100_000;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            let d = simplex_resample(3, &[0, 1, 2], 0.0, &[], &mut r).unwrap();
            for i in 0..3 {
                mean[i] += d.probs()[i] / n as f64;
            }
        }
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() < 0.01, "{m}");
        }
    }

    #[test]
    fn adoption_uses_other_support() {
        let others: [&[usize]; 1] = [&[0, 1]];
        let d = simplex_resample(5, &[2, 3, 4], 1.0, &others, &mut rng(7)).unwrap();
        assert!(d.support().iter().all(|l| [0, 1].contains(l)));
    }

    #[test]
    fn migration_examples() {
        let mut s = DriftState::new(2, vec![0, 1], 0.0, 0.0, 0.0, 0.0).unwrap();
        let mut r = rng(8);
        for _ in 0..100 {
            assert_eq!(migrate_step(&mut s, 0, &mut r).unwrap(), 0);
        }
        let mut s = DriftState::new(2, vec![0, 1], 0.0, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(migrate_step(&mut s, 0, &mut r).unwrap(), 1);
        assert_eq!(migrate_step(&mut s, 0, &mut r).unwrap(), 0);
        let mut s = DriftState::new(1, vec![0], 0.0, 0.0, 0.0, 1.0).unwrap();
        assert!(migrate_step(&mut s, 0, &mut r).is_err());
    }

    #[test]
    fn migration_count_follows_geometric_survival() {
        // 100·(1 − 0.995²⁰⁰) ≈ 63.3 clients migrate at least once
        let mut total = 0usize;
        let trials = 20;
        for trial in 0..trials {
            let mut s = DriftState::new(3, vec![0; 100], 0.0, 0.0, 0.0, 0.005).unwrap();
            let mut moved = vec![false; 100];
            let mut r = rng(1000 + trial);
            for _ in 0..200 {
                for k in 0..100 {
                    if migrate_step(&mut s, k, &mut r).unwrap() != 0 {
                        moved[k] = true;
                    }
                }
            }
            total += moved.iter().filter(|m| **m).count();
        }
        let mean = total as f64 / trials as f64;
        let expected = 100.0 * (1.0 - 0.995f64.powi(200));
        assert!((mean - expected).abs() < 5.0, "{mean} vs {expected}");
    }

    fn spec(noise: f64) -> ClusterSpec {
        ClusterSpec {
            id: 0,
            label_support: vec![0, 1],
            prototypes: vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]],
            targets: vec![0.5, -0.5],
            noise_scale: noise,
        }
    }

    #[test]
    fn batch_examples() {
        let d = LabelDistribution::uniform(2);
        let b = sample_batch(&spec(0.0), &d, 64, &mut rng(9)).unwrap();
        assert_eq!(b.len(), 64);
        for i in 0..b.len() {
            assert_eq!(b.x.row(i), spec(0.0).prototypes[b.labels[i]].as_slice());
        }
        let b = sample_batch(
            &spec(1.0),
            &LabelDistribution::point_mass(2, 1),
            32,
            &mut rng(10),
        )
        .unwrap();
        assert!(b.labels.iter().all(|l| *l == 1));
    }

    #[test]
    fn batch_errors() {
        let mut empty = spec(0.0);
        empty.prototypes.clear();
        assert!(sample_batch(&empty, &LabelDistribution::uniform(2), 4, &mut rng(11)).is_err());
        assert!(sample_batch(&spec(0.0), &LabelDistribution::uniform(2), 0, &mut rng(11)).is_err());
    }

    #[test]
    fn membership_helpers() {
        let m = balanced_membership(100, 3);
        assert_eq!(m.iter().filter(|c| **c == 0).count(), 33);
        assert_eq!(m.iter().filter(|c| **c == 2).count(), 34);
        assert_eq!(
            disjoint_supports(10, 3),
            vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8, 9]]
        );
    }

    #[test]
    fn schedule_is_deterministic_and_valid() {
        for strategy in [
            Strategy::Stationary,
            Strategy::MarkovSwitch,
            Strategy::SimplexResample,
            Strategy::Migration,
        ] {
            let cfg = WorldConfig {
                strategy,
                ..WorldConfig::default()
            };
            let w = World::new(cfg.clone(), 12, 5).unwrap();
            let a = w.schedule(30, 0).unwrap();
            let b = World::new(cfg, 12, 5).unwrap().schedule(30, 0).unwrap();
            for (ea, eb) in a.iter().zip(&b) {
                assert_eq!(ea.client_cluster, eb.client_cluster);
                assert_eq!(ea.client_dist, eb.client_dist);
                assert!(ea.client_dist.iter().all(dist_ok));
            }
        }
    }

    #[test]
    fn strategy_two_without_adoption_stays_in_support() {
        let cfg = WorldConfig {
            strategy: Strategy::SimplexResample,
            adopt_prob: 0.0,
            ..WorldConfig::default()
        };
        let w = World::new(cfg, 9, 3).unwrap();
        for env in w.schedule(40, 0).unwrap() {
            for (k, d) in env.client_dist.iter().enumerate() {
                let support = &w.clusters[env.client_cluster[k]].label_support;
                assert!(d.support().iter().all(|l| support.contains(l)));
            }
        }
    }

    #[test]
    fn export_writes_header_and_rows() {
        let cfg = WorldConfig {
            channels: 2,
            length: 3,
            ..WorldConfig::default()
        };
        let w = World::new(cfg, 3, 1).unwrap();
        let mut buf = Vec::new();
        export_csv(&w, 2, 4, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x0,x1,x2,x3,x4,x5,label,client,round");
        assert_eq!(lines.len(), 1 + 2 * 3 * 4);
    }
}
