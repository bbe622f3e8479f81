//! Experiment configuration in TOML with dotted keys, e.g.
//!
//! ```toml
//! experiment_id = "digits"
//! master_seed = 7
//! n_runs = 3
//! data.family = "synth_digits"
//! data.source = "clean"
//! data.targets = ["noisy_bg"]
//! sweep.learning_rate = [1e-5, 3e-5, 5e-5]
//! ```
//!
//! Every field has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{check_domain, Domain, ShiftFamily};
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelSpec};
use crate::pipelines::{HyperParams, OptimizerKind, PretrainOptions, SweepSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `two_moons_rotate`, `gauss_mean_shift` or `synth_digits`.
    pub family: String,
    pub source: String,
    pub targets: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub gauss_dim: usize,
    pub gauss_classes: usize,
    pub gauss_separation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            family: "synth_digits".into(),
            source: "clean".into(),
            targets: vec!["noisy_bg".into()],
            n_train: 1000,
            n_test: 1000,
            noise: 0.05,
            gauss_dim: 2,
            gauss_classes: 3,
            gauss_separation: 3.0,
        }
    }
}

impl DataConfig {
    pub fn family(&self) -> Result<ShiftFamily> {
        match self.family.as_str() {
            "two_moons_rotate" => Ok(ShiftFamily::TwoMoonsRotate),
            "synth_digits" => Ok(ShiftFamily::SynthDigits),
            "gauss_mean_shift" => Ok(ShiftFamily::GaussMeanShift {
                dim: self.gauss_dim,
                num_classes: self.gauss_classes,
                separation: self.gauss_separation,
            }),
            other => Err(Error::Config(format!("unknown data.family '{other}'"))),
        }
    }

    pub fn source_domain(&self) -> Result<Domain> {
        Domain::from_str(&self.source)
    }

    pub fn target_domains(&self) -> Result<Vec<Domain>> {
        self.targets.iter().map(|t| Domain::from_str(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `small_cnn` or `mlp`.
    pub arch: String,
    pub hidden: Vec<usize>,
    pub conv_channels: [usize; 2],
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: "small_cnn".into(),
            hidden: vec![64, 64],
            conv_channels: [8, 12],
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub target_acc: f64,
    pub epoch_cap: usize,
    pub hp: HyperParams,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            target_acc: 0.85,
            epoch_cap: 200,
            hp: HyperParams::default(),
        }
    }
}

impl PretrainConfig {
    pub fn options(&self) -> PretrainOptions {
        PretrainOptions {
            hp: self.hp,
            epoch_cap: self.epoch_cap,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hp: HyperParams,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AverageConfig {
    /// Prefix sizes to average; empty means the whole population.
    pub m_values: Vec<usize>,
    /// Skip the shared-initialization check.
    pub allow_mixed_init: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptOrder {
    After,
    Before,
}

impl FromStr for AdaptOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "after" => Ok(AdaptOrder::After),
            "before" => Ok(AdaptOrder::Before),
            _ => Err(Error::InvalidArgument(format!("order must be 'after' or 'before', got '{s}'"))),
        }
    }
}

impl AdaptOrder {
    pub fn phase(&self) -> &'static str {
        match self {
            AdaptOrder::After => "adapt_after",
            AdaptOrder::Before => "adapt_before",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub enabled: bool,
    pub k: Vec<usize>,
    pub orders: Vec<AdaptOrder>,
    pub head_only: bool,
    pub hp: HyperParams,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            k: vec![10],
            orders: vec![AdaptOrder::After, AdaptOrder::Before],
            head_only: false,
            hp: HyperParams {
                epochs: 50,
                ..HyperParams::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub models: Vec<usize>,
    pub optimizers: Vec<OptimizerKind>,
    pub shots: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            models: vec![2, 6, 10],
            optimizers: vec![OptimizerKind::SamAdam, OptimizerKind::Adam],
            shots: vec![1, 5, 10, 20],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub n_runs: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub sweep: SweepSpace,
    pub average: AverageConfig,
    pub adapt: AdaptConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "experiment".into(),
            master_seed: 0,
            out_dir: PathBuf::from("runs"),
            n_runs: 3,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
            sweep: SweepSpace::default(),
            average: AverageConfig::default(),
            adapt: AdaptConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let family = self.data.family()?;
        let classes = family.num_classes();
        let m = &self.model;
        let architecture = match m.arch.as_str() {
            "mlp" => Architecture::Mlp {
                input_dim: family.input_dim(),
                hidden: m.hidden.clone(),
                dropout: m.dropout,
            },
            "small_cnn" => {
                if !matches!(family, ShiftFamily::SynthDigits) {
                    return Err(Error::Config(format!("model.arch small_cnn needs image data, not {}", family.name())));
                }
                Architecture::SmallCnn {
                    input_channels: 1,
                    input_side: crate::data::glyphs::SIDE,
                    conv_channels: m.conv_channels,
                    hidden: m.hidden.clone(),
                    dropout: m.dropout,
                }
            }
            other => return Err(Error::Config(format!("unknown model.arch '{other}'"))),
        };
        let spec = ModelSpec {
            architecture,
            num_classes: classes,
        };
        spec.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(spec)
    }

    /// Checks every field; nothing is computed before this passes.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.experiment_id.is_empty()
            || !self
                .experiment_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        {
            return cfg(format!(
                "experiment_id '{}' must be non-empty and use only [A-Za-z0-9._-]",
                self.experiment_id
            ));
        }
        if self.n_runs == 0 {
            return cfg("n_runs must be at least 1".into());
        }
        let family = self.data.family()?;
        let classes = family.num_classes();
        for d in std::iter::once(self.data.source_domain()?).chain(self.data.target_domains()?) {
            check_domain(&family, &d).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.data.n_train < 2 * classes || !self.data.n_train.is_multiple_of(classes) {
            return cfg(format!("data.n_train must be a multiple of {classes} and at least {}", 2 * classes));
        }
        if self.data.n_test < classes || !self.data.n_test.is_multiple_of(classes) {
            return cfg(format!("data.n_test must be a positive multiple of {classes}"));
        }
        if !(self.data.noise >= 0.0) {
            return cfg("data.noise must be >= 0".into());
        }
        self.model_spec()?;
        if !(self.pretrain.target_acc > 0.0 && self.pretrain.target_acc < 1.0) {
            return cfg(format!("pretrain.target_acc {} outside (0, 1)", self.pretrain.target_acc));
        }
        if self.pretrain.epoch_cap == 0 {
            return cfg("pretrain.epoch_cap must be positive".into());
        }
        for (name, hp) in [
            ("pretrain.hp", &self.pretrain.hp),
            ("probe.hp", &self.probe.hp),
            ("adapt.hp", &self.adapt.hp),
        ] {
            hp.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        self.sweep.validate()?;
        let members = 2 * self.n_runs;
        for &m in &self.average.m_values {
            if m == 0 || m > members {
                return cfg(format!("average.m_values entry {m} must be in 1..={members}"));
            }
        }
        if self.adapt.enabled {
            if self.data.targets.is_empty() {
                return cfg("adapt.enabled needs at least one data.targets entry".into());
            }
            if self.adapt.orders.is_empty() {
                return cfg("adapt.orders must not be empty".into());
            }
            let per_class = self.data.n_train / classes;
            for &k in &self.adapt.k {
                if k == 0 || k > per_class {
                    return cfg(format!("adapt.k entry {k} must be in 1..={per_class}"));
                }
            }
        }
        if self.ablation.models.contains(&0) {
            return cfg("ablation.models entries must be positive".into());
        }
        let per_class = self.data.n_train / classes;
        if self.ablation.shots.iter().any(|&k| k == 0 || k > per_class) {
            return cfg(format!("ablation.shots entries must be in 1..={per_class}"));
        }
        Ok(())
    }
}
