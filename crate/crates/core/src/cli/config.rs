//! Run configuration: TOML file merged over defaults, then CLI flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::admm::{AdmmConfig, RhoGrowth, StepDecay, DEFAULT_PATIENCE};
use crate::error::{Error, Result};
use crate::network::{Architecture, LayerSpec};
use crate::quantset::{LayerPolicy, QuantizationSet};
use crate::train::PretrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ArchChoice {
    Mlp,
    Cnn,
}

impl ArchChoice {
    pub fn build(self) -> Architecture {
        match self {
            ArchChoice::Mlp => Architecture::mnist_mlp(),
            ArchChoice::Cnn => Architecture::mnist_cnn(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    /// Use only the first `n` training samples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    pub pretrain: PretrainSection,
    pub quantize: QuantizeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data_dir: PathBuf::from("data/mnist"),
            out: PathBuf::from("runs/default"),
            train_limit: None,
            pretrain: PretrainSection::default(),
            quantize: QuantizeSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub arch: ArchChoice,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_schedule: StepDecay,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let base = PretrainConfig::default();
        Self {
            arch: ArchChoice::Mlp,
            epochs: base.epochs,
            batch_size: base.batch_size,
            lr: base.lr,
            momentum: base.momentum,
            lr_schedule: base.lr_schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeSection {
    /// Pretrained model to start from.
    pub model: PathBuf,
    pub set: QuantizationSet,
    /// `selector=policy` overrides applied in order, e.g. `fc_last=full_precision`.
    pub layer_policy: Vec<String>,
    pub rho: f64,
    /// Set `factor = 1` to keep rho fixed.
    pub rho_growth: RhoGrowth,
    /// Proximal learning rates; default to the pretrained model's final
    /// effective step size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_c: Option<f64>,
    /// Extragradient iterations per round; default one epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proximal_steps_per_round: Option<usize>,
    pub max_rounds: usize,
    pub primal_tolerance: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub lr_schedule: StepDecay,
    /// Write codes bit-packed instead of one byte each.
    pub packed: bool,
}

impl Default for QuantizeSection {
    fn default() -> Self {
        Self {
            model: PathBuf::from("runs/default/model.lbm"),
            set: QuantizationSet::Ternary,
            layer_policy: Vec::new(),
            rho: 0.05,
            rho_growth: RhoGrowth {
                factor: 1.5,
                every: 3,
                cap: 1.0,
            },
            beta_p: None,
            beta_c: None,
            proximal_steps_per_round: None,
            max_rounds: 24,
            primal_tolerance: 1e-4,
            patience: DEFAULT_PATIENCE,
            batch_size: 64,
            lr_schedule: StepDecay { gamma: 0.6, every: 4 },
            packed: false,
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            momentum: self.pretrain.momentum,
            lr_schedule: self.pretrain.lr_schedule,
            seed: self.seed,
        }
    }

    /// ADMM settings for `arch`; `default_beta` fills unset learning rates.
    pub fn admm_config(&self, arch: &Architecture, default_beta: Option<f64>) -> Result<AdmmConfig> {
        let q = &self.quantize;
        let beta_p = q.beta_p.or(default_beta).ok_or_else(|| Error::Config("beta_p is unset and the model records no final learning rate".into()))?;
        let beta_c = q.beta_c.unwrap_or(beta_p);
        let config = AdmmConfig {
            rho: q.rho,
            rho_growth: (q.rho_growth.factor != 1.0).then_some(q.rho_growth),
            beta_p,
            beta_c,
            proximal_steps_per_round: q.proximal_steps_per_round,
            max_rounds: q.max_rounds,
            primal_tolerance: q.primal_tolerance,
            patience: q.patience,
            layer_policy: resolve_layer_policy(arch, q.set, &q.layer_policy)?,
            lr_schedule: q.lr_schedule,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Weight-layer indices picked out by `selector`.
///
/// Selectors: a layer name (`fc0`, `conv1`), `all`, `first`, `last`,
/// `fc_last` (last fully connected layer), `conv` (every convolution) and
/// `1x1` (every convolution with a 1x1 kernel).
pub fn select_layers(arch: &Architecture, selector: &str) -> Result<Vec<usize>> {
    let specs: Vec<&LayerSpec> = arch.param_layers().collect();
    let names = arch.layer_names();
    let n = specs.len();
    let picked: Vec<usize> = match selector {
        "all" => (0..n).collect(),
        "first" => (0..n.min(1)).collect(),
        "last" => n.checked_sub(1).into_iter().collect(),
        "fc_last" => (0..n).rev().find(|&i| matches!(specs[i], LayerSpec::FullyConnected { .. })).into_iter().collect(),
        "conv" => (0..n).filter(|&i| matches!(specs[i], LayerSpec::Conv2d { .. })).collect(),
        "1x1" => (0..n).filter(|&i| matches!(specs[i], LayerSpec::Conv2d { kernel: 1, .. })).collect(),
        name => match names.iter().position(|x| x == name) {
            Some(i) => vec![i],
            None => {
                return Err(Error::Config(format!(
                    "unknown layer selector {name:?} (layers: {})",
                    names.join(", ")
                )))
            }
        },
    };
    Ok(picked)
}

/// Start from `set` on every weight layer, then apply `selector=policy`
/// overrides in order.
pub fn resolve_layer_policy(arch: &Architecture, set: QuantizationSet, overrides: &[String]) -> Result<Vec<LayerPolicy>> {
    let mut policies = vec![LayerPolicy::Codebook(set); arch.num_param_layers()];
    for entry in overrides.iter().flat_map(|s| s.split(',')).map(str::trim).filter(|s| !s.is_empty()) {
        let (selector, policy) = entry
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("layer policy {entry:?} is not selector=policy")))?;
        let policy: LayerPolicy = policy.parse().map_err(|e| Error::Config(format!("{entry:?}: {e}")))?;
        for i in select_layers(arch, selector.trim())? {
            policies[i] = policy;
        }
    }
    Ok(policies)
}
