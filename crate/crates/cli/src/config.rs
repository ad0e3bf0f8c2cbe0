//! Run configuration, read from TOML.
//!
//! Every table is optional except `[dataset]`; omitted keys fall back to the
//! defaults below (10 clients on a ring, lr 0.001, batch 100, one fine-tune round).

use std::path::{Path, PathBuf};

use dfu_core::data::{Granularity, PartitionMode, RequestSpec};
use dfu_core::dpsgd::StatMode;
use dfu_core::models::LossKind;
use dfu_core::rng::derive_seed;
use dfu_core::topology::TopologySpec;
use dfu_core::unlearn::{NoiseMode, PrivacyBudget};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

// child-seed tags
pub const SEED_TOPOLOGY: u64 = 1;
pub const SEED_PARTITION: u64 = 2;
pub const SEED_TRAIN: u64 = 3;
pub const SEED_REQUEST: u64 = 4;
pub const SEED_NOISE: u64 = 5;
pub const SEED_ATTACK: u64 = 6;
pub const SEED_SYNTHETIC: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Worker threads; not part of the config hash.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub topology: TopologyConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub unlearn: UnlearnSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    #[default]
    Ring,
    ErdosRenyi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    #[serde(default)]
    pub kind: TopologyKind,
    #[serde(default = "default_clients")]
    pub clients: usize,
    /// Edge probability for Erdos-Renyi graphs.
    #[serde(default = "default_edge_p")]
    pub p: f64,
    /// Graph seed; derived from the master seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_clients() -> usize {
    10
}

fn default_edge_p() -> f64 {
    0.5
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self { kind: TopologyKind::Ring, clients: default_clients(), p: default_edge_p(), seed: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    MnistIdx,
    Csv,
    Synthetic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Labels as stored.
    #[default]
    Labels,
    /// Class id modulo 2.
    Parity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DataKind,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub train_csv: Option<PathBuf>,
    #[serde(default)]
    pub test_csv: Option<PathBuf>,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default)]
    pub n_test: Option<usize>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub classes: Option<usize>,
    /// Keep only the first rows of the training file.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default = "one")]
    pub pool: usize,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub row_normalize: bool,
    #[serde(default)]
    pub task: Task,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    #[default]
    Iid,
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default)]
    pub mode: PartitionKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.3
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { mode: PartitionKind::Iid, alpha: default_alpha() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    LeastSquares,
    #[default]
    Logistic,
    Multinomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub loss: LossName,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { loss: LossName::Logistic, lambda: default_lambda() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Fixed round count; when absent, training stops once the loss moves less
    /// than `tol` over `window` rounds, capped at `max_rounds`.
    #[serde(default)]
    pub rounds: Option<usize>,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub init_std: f64,
    /// Rounds between metric lines.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_max_rounds() -> usize {
    20_000
}
fn default_tol() -> f64 {
    1e-4
}
fn default_window() -> usize {
    10
}
fn default_lr() -> f64 {
    0.001
}
fn default_batch() -> usize {
    100
}
fn default_log_every() -> usize {
    100
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            rounds: None,
            max_rounds: default_max_rounds(),
            tol: default_tol(),
            window: default_window(),
            lr: default_lr(),
            batch_size: default_batch(),
            init_std: 0.0,
            log_every: default_log_every(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnSection {
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    /// Per-client deletion fraction for sample requests.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    /// Clients issuing sample requests; all when absent.
    #[serde(default)]
    pub clients: Option<Vec<usize>>,
    #[serde(default)]
    pub class: Option<usize>,
    #[serde(default)]
    pub client: Option<usize>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub stat_mode: StatMode,
    #[serde(default = "one")]
    pub finetune_rounds: usize,
    #[serde(default)]
    pub capacity: Option<usize>,
    #[serde(default)]
    pub noise: NoiseMode,
}

fn default_granularity() -> Granularity {
    Granularity::Samples
}
fn default_fraction() -> f64 {
    0.1
}
fn default_epsilon() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    0.05
}

impl Default for UnlearnSection {
    fn default() -> Self {
        Self {
            granularity: default_granularity(),
            fraction: default_fraction(),
            clients: None,
            class: None,
            client: None,
            epsilon: default_epsilon(),
            delta: default_delta(),
            stat_mode: StatMode::ExactHessian,
            finetune_rounds: 1,
            capacity: None,
            noise: NoiseMode::Calibrated,
        }
    }
}

/// Command-line values that replace config entries before hashing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub stat_mode: Option<StatMode>,
    pub finetune_rounds: Option<usize>,
    pub no_noise: bool,
}

fn require<'a, T>(v: &'a Option<T>, key: &str, kind: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| CliError::Config(format!("dataset.{key} is required for kind = \"{kind}\"")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let ds = &mut self.dataset;
        for p in [&mut ds.train_images, &mut ds.train_labels, &mut ds.test_images, &mut ds.test_labels, &mut ds.train_csv, &mut ds.test_csv]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(p) = &o.output_dir {
            self.output_dir = p.clone();
        }
        if o.threads.is_some() {
            self.threads = o.threads;
        }
        if let Some(v) = o.epsilon {
            self.unlearn.epsilon = v;
        }
        if let Some(v) = o.delta {
            self.unlearn.delta = v;
        }
        if let Some(v) = o.stat_mode {
            self.unlearn.stat_mode = v;
        }
        if let Some(v) = o.finetune_rounds {
            self.unlearn.finetune_rounds = v;
        }
        if o.no_noise {
            self.unlearn.noise = NoiseMode::Disabled;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.topology.clients == 0 {
            return bad("topology.clients must be at least 1".into());
        }
        if self.topology.kind == TopologyKind::ErdosRenyi && !(self.topology.p > 0.0 && self.topology.p <= 1.0) {
            return bad(format!("topology.p must lie in (0, 1], got {}", self.topology.p));
        }
        let ds = &self.dataset;
        match ds.kind {
            DataKind::MnistIdx => {
                for (k, v) in [("train_images", &ds.train_images), ("train_labels", &ds.train_labels), ("test_images", &ds.test_images), ("test_labels", &ds.test_labels)] {
                    require(v, k, "mnist_idx")?;
                }
            }
            DataKind::Csv => {
                require(&ds.train_csv, "train_csv", "csv")?;
                require(&ds.test_csv, "test_csv", "csv")?;
            }
            DataKind::Synthetic => {
                for (k, v) in [("n_train", &ds.n_train), ("n_test", &ds.n_test), ("dim", &ds.dim), ("classes", &ds.classes)] {
                    if *require(v, k, "synthetic")? == 0 {
                        return bad(format!("dataset.{k} must be positive"));
                    }
                }
            }
        }
        if ds.pool == 0 {
            return bad("dataset.pool must be at least 1".into());
        }
        if self.partition.mode == PartitionKind::Dirichlet && !(self.partition.alpha > 0.0) {
            return bad(format!("partition.alpha must be positive, got {}", self.partition.alpha));
        }
        if !(self.model.lambda > 0.0) || !self.model.lambda.is_finite() {
            return bad(format!("model.lambda must be positive, got {}", self.model.lambda));
        }
        let t = &self.train;
        if !(t.lr > 0.0) || t.batch_size == 0 || t.log_every == 0 || t.window == 0 || !(t.tol > 0.0) || !(t.init_std >= 0.0) {
            return bad("train: lr and tol must be positive; batch_size, window and log_every at least 1; init_std nonnegative".into());
        }
        if t.rounds == Some(0) || t.max_rounds == 0 {
            return bad("train.rounds and train.max_rounds must be at least 1".into());
        }
        if let Some(0) = self.threads {
            return bad("threads must be at least 1".into());
        }
        self.budget()?;
        self.request_spec()?;
        Ok(())
    }

    pub fn budget(&self) -> Result<PrivacyBudget> {
        PrivacyBudget::new(self.unlearn.epsilon, self.unlearn.delta).map_err(|e| CliError::Config(format!("unlearn: {e}")))
    }

    pub fn request_spec(&self) -> Result<RequestSpec> {
        let u = &self.unlearn;
        Ok(match u.granularity {
            Granularity::Samples => RequestSpec::Fraction { fraction: u.fraction, clients: u.clients.clone() },
            Granularity::Class => RequestSpec::Class {
                label: u.class.ok_or_else(|| CliError::Config("unlearn.class is required for class requests".into()))?,
            },
            Granularity::Client => RequestSpec::Client {
                client: u.client.ok_or_else(|| CliError::Config("unlearn.client is required for client requests".into()))?,
            },
        })
    }

    pub fn topology_spec(&self) -> TopologySpec {
        let n = self.topology.clients;
        match self.topology.kind {
            TopologyKind::Ring => TopologySpec::Ring { n },
            TopologyKind::ErdosRenyi => TopologySpec::ErdosRenyi {
                n,
                p: self.topology.p,
                seed: self.topology.seed.unwrap_or_else(|| derive_seed(self.seed, SEED_TOPOLOGY)),
            },
        }
    }

    pub fn partition_mode(&self) -> PartitionMode {
        match self.partition.mode {
            PartitionKind::Iid => PartitionMode::Iid,
            PartitionKind::Dirichlet => PartitionMode::Dirichlet { alpha: self.partition.alpha },
        }
    }

    pub fn loss_kind(&self, n_classes: usize) -> LossKind {
        match self.model.loss {
            LossName::LeastSquares => LossKind::LeastSquares,
            LossName::Logistic => LossKind::Logistic,
            LossName::Multinomial => LossKind::Multinomial { classes: n_classes },
        }
    }

    pub fn child_seed(&self, tag: u64) -> u64 {
        derive_seed(self.seed, tag)
    }

    /// SHA-256 over everything that determines results (not the output path or thread count).
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        canon.threads = None;
        let json = serde_json::to_vec(&canon).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
