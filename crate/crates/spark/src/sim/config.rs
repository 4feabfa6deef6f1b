//! Run configuration: TOML-backed, strict about unknown keys, with every
//! ablation from the protocol's variant grid expressible through flags.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::distill::DistillSchedule;
use crate::error::{Result, SparkError};
use crate::model::MlpArchitecture;
use crate::projection::{Codec, ProjectionMode};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: ExperimentSection,
    pub output: OutputSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub projection: ProjectionSection,
    pub distill: DistillSection,
    pub momentum: MomentumSection,
    pub data: DataSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentSection::default(),
            output: OutputSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            projection: ProjectionSection::default(),
            distill: DistillSection::default(),
            momentum: MomentumSection::default(),
            data: DataSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { name: "spark".to_string(), seeds: vec![1] }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub overwrite: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { input_dim: 32, hidden_dim: 32, num_classes: 10 }
    }
}

impl ModelSection {
    pub fn architecture(&self) -> MlpArchitecture {
        MlpArchitecture::new(self.input_dim, self.hidden_dim, self.num_classes)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub clients: usize,
    pub degree: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub t_evolve: usize,
    pub val_fraction: f64,
    /// Freeze the round-0 graph instead of resampling each round.
    pub static_topology: bool,
    /// Initialize every client from the same weights.
    pub shared_init: bool,
    pub kernel_mem_cap_bytes: usize,
    /// Per-round gradient-norm diagnostics on a fixed probe batch.
    pub diagnostics: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            clients: 16,
            degree: 3,
            rounds: 40,
            batch_size: 64,
            eta: 1e-4,
            t_evolve: 100,
            val_fraction: 0.1,
            static_topology: false,
            shared_init: true,
            kernel_mem_cap_bytes: crate::kernel::DEFAULT_KERNEL_MEM_CAP,
            diagnostics: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionSection {
    pub k: usize,
    /// "gaussian" or "identity".
    pub mode: String,
    /// "f64", "f32", "f16", or "i8".
    pub codec: String,
    /// Fraction of the minibatch whose Jacobian rows are transmitted.
    pub sample_fraction: f64,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        Self {
            k: 64,
            mode: "gaussian".to_string(),
            codec: "f64".to_string(),
            sample_fraction: 1.0,
        }
    }
}

impl ProjectionSection {
    pub fn parsed_mode(&self) -> Result<ProjectionMode> {
        match self.mode.as_str() {
            "gaussian" => Ok(ProjectionMode::Gaussian),
            "identity" => Ok(ProjectionMode::Identity),
            other => Err(SparkError::config(format!(
                "projection.mode {other:?} is not \"gaussian\" or \"identity\""
            ))),
        }
    }

    pub fn parsed_codec(&self) -> Result<Codec> {
        match self.codec.as_str() {
            "f64" => Ok(Codec::F64),
            "f32" => Ok(Codec::F32),
            "f16" => Ok(Codec::F16),
            "i8" => Ok(Codec::I8),
            other => Err(SparkError::config(format!(
                "projection.codec {other:?} is not one of f64/f32/f16/i8"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub alpha_final: f64,
    pub tau_final: f64,
    /// Defaults to ceil(0.2 * rounds) when absent.
    pub warm_rounds: Option<usize>,
    /// Never leave warm-up (hard labels for the whole run).
    pub warm_forever: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self { alpha_final: 0.3, tau_final: 3.0, warm_rounds: None, warm_forever: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentumSection {
    pub mu: f64,
}

impl Default for MomentumSection {
    fn default() -> Self {
        Self { mu: 0.9 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// "synth" or "idx".
    pub source: String,
    pub alpha: f64,
    pub partition_seed: Option<u64>,
    // synth knobs
    pub synth_samples_per_class: usize,
    pub synth_holdout_per_class: usize,
    pub synth_spread: f64,
    // idx paths
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Truncate the training set (0 = use everything).
    pub train_limit: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "synth".to_string(),
            alpha: 0.1,
            partition_seed: None,
            synth_samples_per_class: 200,
            synth_holdout_per_class: 100,
            synth_spread: 0.15,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: 0,
        }
    }
}

/// Table-style ablation switches. Turning one off overrides the
/// corresponding knobs: no projection means identity mode, no distillation
/// means permanent warm-up, no momentum means mu = 0.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub projection: bool,
    pub distillation: bool,
    pub momentum: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { projection: true, distillation: true, momentum: true }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| SparkError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Effective momentum coefficient after ablation flags.
    pub fn effective_mu(&self) -> f64 {
        if self.ablation.momentum {
            self.momentum.mu
        } else {
            0.0
        }
    }

    /// Effective projection mode after ablation flags.
    pub fn effective_mode(&self) -> Result<ProjectionMode> {
        if self.ablation.projection {
            self.projection.parsed_mode()
        } else {
            Ok(ProjectionMode::Identity)
        }
    }

    /// Effective distillation schedule after ablation flags.
    pub fn effective_schedule(&self) -> Result<DistillSchedule> {
        let r = self.train.rounds;
        let sched = if self.distill.warm_forever || !self.ablation.distillation {
            DistillSchedule::warm_forever(r)
        } else {
            let mut s = DistillSchedule::defaults(r);
            s.alpha_final = self.distill.alpha_final;
            s.tau_final = self.distill.tau_final;
            if let Some(w) = self.distill.warm_rounds {
                s.warm_rounds = w;
            }
            s
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.clients == 0 {
            return Err(SparkError::config("train.clients must be positive".to_string()));
        }
        if t.degree >= t.clients {
            return Err(SparkError::config(format!(
                "train.degree {} must be below train.clients {}",
                t.degree, t.clients
            )));
        }
        if t.clients * t.degree % 2 != 0 {
            return Err(SparkError::config(format!(
                "no {}-regular graph on {} clients (odd stub count)",
                t.degree, t.clients
            )));
        }
        if t.batch_size == 0 {
            return Err(SparkError::config("train.batch_size must be positive".to_string()));
        }
        if t.eta <= 0.0 {
            return Err(SparkError::config(format!("train.eta {} must be positive", t.eta)));
        }
        if t.t_evolve == 0 {
            return Err(SparkError::config("train.t_evolve must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(SparkError::config(format!(
                "train.val_fraction {} outside [0, 1)",
                t.val_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.momentum.mu) {
            return Err(SparkError::config(format!(
                "momentum.mu {} outside [0, 1)",
                self.momentum.mu
            )));
        }
        if !(self.projection.sample_fraction > 0.0 && self.projection.sample_fraction <= 1.0) {
            return Err(SparkError::config(format!(
                "projection.sample_fraction {} outside (0, 1]",
                self.projection.sample_fraction
            )));
        }
        self.projection.parsed_mode()?;
        self.projection.parsed_codec()?;
        if self.experiment.seeds.is_empty() {
            return Err(SparkError::config("experiment.seeds must be nonempty".to_string()));
        }
        match self.data.source.as_str() {
            "synth" => {
                if self.data.synth_samples_per_class == 0 {
                    return Err(SparkError::config(
                        "data.synth_samples_per_class must be positive".to_string(),
                    ));
                }
            }
            "idx" => {
                for (key, path) in [
                    ("train_images", &self.data.train_images),
                    ("train_labels", &self.data.train_labels),
                    ("test_images", &self.data.test_images),
                    ("test_labels", &self.data.test_labels),
                ] {
                    if path.is_none() {
                        return Err(SparkError::config(format!(
                            "data.{key} is required when data.source = \"idx\""
                        )));
                    }
                }
            }
            other => {
                return Err(SparkError::config(format!(
                    "data.source {other:?} is not \"synth\" or \"idx\""
                )));
            }
        }
        if self.data.alpha <= 0.0 {
            return Err(SparkError::config(format!(
                "data.alpha {} must be positive",
                self.data.alpha
            )));
        }
        if self.train.rounds > 0 {
            self.effective_schedule()?;
        }
        Ok(())
    }

    /// Applies a `key=value` override using dotted config paths
    /// (`train.eta=0.1`) or bare aliases for the common knobs
    /// (`rounds=40`, `k=64`, `mu=0`, `seed=7`).
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let canonical = match key {
            "rounds" => "train.rounds",
            "clients" => "train.clients",
            "degree" | "kappa" => "train.degree",
            "batch" | "batch_size" => "train.batch_size",
            "eta" => "train.eta",
            "k" => "projection.k",
            "mu" => "momentum.mu",
            "alpha" => "data.alpha",
            "seed" => "experiment.seeds",
            other => other,
        };
        macro_rules! parse {
            ($v:expr, $t:ty, $key:expr) => {
                $v.parse::<$t>().map_err(|e| {
                    SparkError::config(format!("override {}={}: {e}", $key, $v))
                })?
            };
        }
        match canonical {
            "experiment.name" => self.experiment.name = value.to_string(),
            "experiment.seeds" => {
                self.experiment.seeds = value
                    .split(',')
                    .map(|s| s.trim().parse::<u64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| SparkError::config(format!("override seeds={value}: {e}")))?;
            }
            "output.dir" => self.output.dir = Some(PathBuf::from(value)),
            "output.overwrite" => self.output.overwrite = parse!(value, bool, key),
            "model.input_dim" => self.model.input_dim = parse!(value, usize, key),
            "model.hidden_dim" => self.model.hidden_dim = parse!(value, usize, key),
            "model.num_classes" => self.model.num_classes = parse!(value, usize, key),
            "train.clients" => self.train.clients = parse!(value, usize, key),
            "train.degree" => self.train.degree = parse!(value, usize, key),
            "train.rounds" => self.train.rounds = parse!(value, usize, key),
            "train.batch_size" => self.train.batch_size = parse!(value, usize, key),
            "train.eta" => self.train.eta = parse!(value, f64, key),
            "train.t_evolve" => self.train.t_evolve = parse!(value, usize, key),
            "train.val_fraction" => self.train.val_fraction = parse!(value, f64, key),
            "train.static_topology" => self.train.static_topology = parse!(value, bool, key),
            "train.shared_init" => self.train.shared_init = parse!(value, bool, key),
            "train.diagnostics" => self.train.diagnostics = parse!(value, bool, key),
            "projection.k" => self.projection.k = parse!(value, usize, key),
            "projection.mode" => self.projection.mode = value.to_string(),
            "projection.codec" => self.projection.codec = value.to_string(),
            "projection.sample_fraction" => {
                self.projection.sample_fraction = parse!(value, f64, key)
            }
            "distill.alpha_final" => self.distill.alpha_final = parse!(value, f64, key),
            "distill.tau_final" => self.distill.tau_final = parse!(value, f64, key),
            "distill.warm_rounds" => self.distill.warm_rounds = Some(parse!(value, usize, key)),
            "distill.warm_forever" => self.distill.warm_forever = parse!(value, bool, key),
            "momentum.mu" => self.momentum.mu = parse!(value, f64, key),
            "data.source" => self.data.source = value.to_string(),
            "data.alpha" => self.data.alpha = parse!(value, f64, key),
            "data.partition_seed" => self.data.partition_seed = Some(parse!(value, u64, key)),
            "data.synth_samples_per_class" => {
                self.data.synth_samples_per_class = parse!(value, usize, key)
            }
            "data.synth_holdout_per_class" => {
                self.data.synth_holdout_per_class = parse!(value, usize, key)
            }
            "data.synth_spread" => self.data.synth_spread = parse!(value, f64, key),
            "data.train_limit" => self.data.train_limit = parse!(value, usize, key),
            "data.train_images" => self.data.train_images = Some(PathBuf::from(value)),
            "data.train_labels" => self.data.train_labels = Some(PathBuf::from(value)),
            "data.test_images" => self.data.test_images = Some(PathBuf::from(value)),
            "data.test_labels" => self.data.test_labels = Some(PathBuf::from(value)),
            "ablation.projection" => self.ablation.projection = parse!(value, bool, key),
            "ablation.distillation" => self.ablation.distillation = parse!(value, bool, key),
            "ablation.momentum" => self.ablation.momentum = parse!(value, bool, key),
            other => {
                return Err(SparkError::config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }
}
