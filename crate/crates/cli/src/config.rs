//! Run configuration: built-in defaults < preset < config file < flags.

use std::fs;
use std::path::Path;

use ckafscil::data::SynthConfig;
use ckafscil::{Hyperparams, InitScheme, Preset};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Contents of a `--config` TOML file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    #[serde(default)]
    pub hyperparams: HpOverrides,
    #[serde(default)]
    pub synth: SynthOverrides,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Kmeans,
    Gaussian,
}

/// Hyperparameter overrides, shared by command-line flags and the
/// `[hyperparams]` table of a config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct HpOverrides {
    /// Logit scale of all three losses
    #[arg(long)]
    pub tau: Option<f64>,
    /// Power transform exponent
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Attention sharpness of primitive replacement
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Weight of the composition loss
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of the replacement composition loss
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Primitives per class
    #[arg(long)]
    pub n_prims: Option<usize>,
    /// SGD learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Epochs of the base session
    #[arg(long)]
    pub base_epochs: Option<usize>,
    /// Epochs of each incremental session
    #[arg(long)]
    pub inc_epochs: Option<usize>,
    /// Base-session mini-batch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed of every random substream
    #[arg(long)]
    pub seed: Option<u64>,
    /// Primitive initialization
    #[arg(long, value_enum)]
    pub init: Option<InitKind>,
    /// Standard deviation of gaussian initialization
    #[arg(long)]
    pub init_sigma: Option<f64>,
    /// Treat replacement attention weights as constants in backprop
    #[arg(long)]
    pub stop_attention_grad: Option<bool>,
    /// Keep the prototype loss in incremental sessions
    #[arg(long)]
    pub cls_in_incremental: Option<bool>,
}

macro_rules! overlay {
    ($src:expr, $dst:expr, $($f:ident),*) => {
        $(if let Some(v) = $src.$f.clone() { $dst.$f = v; })*
    };
}

impl HpOverrides {
    pub fn apply(&self, hp: &mut Hyperparams) {
        overlay!(
            self,
            hp,
            tau,
            alpha,
            gamma,
            lambda1,
            lambda2,
            n_prims,
            lr,
            momentum,
            base_epochs,
            inc_epochs,
            batch_size,
            seed,
            stop_attention_grad,
            cls_in_incremental
        );
        match (self.init, self.init_sigma, hp.init) {
            (Some(InitKind::Kmeans), _, _) => hp.init = InitScheme::Kmeans,
            (Some(InitKind::Gaussian), sigma, _) => {
                hp.init = InitScheme::Gaussian {
                    sigma: sigma.unwrap_or(0.1),
                }
            }
            (None, Some(sigma), InitScheme::Gaussian { .. }) => {
                hp.init = InitScheme::Gaussian { sigma }
            }
            _ => {}
        }
    }
}

/// Synthetic-generator overrides, shared by `gen` flags and the `[synth]` table.
#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct SynthOverrides {
    /// Number of true primitive vectors in the pool
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// True primitives per class
    #[arg(long)]
    pub prims_per_class: Option<usize>,
    /// Class-shared patches per sample
    #[arg(long)]
    pub shared: Option<usize>,
    /// Distractor patches per sample
    #[arg(long)]
    pub distractors: Option<usize>,
    /// Per-channel noise standard deviation
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Channels per patch
    #[arg(long)]
    pub dim: Option<usize>,
    /// Classes in the base session
    #[arg(long)]
    pub base_classes: Option<usize>,
    /// Incremental sessions
    #[arg(long)]
    pub sessions: Option<usize>,
    /// New classes per incremental session
    #[arg(long)]
    pub classes_per_session: Option<usize>,
    /// Training samples per novel class
    #[arg(long)]
    pub shots: Option<usize>,
    /// Training samples per base class
    #[arg(long)]
    pub base_train_per_class: Option<usize>,
    /// Test samples per class
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Generator seed
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthOverrides {
    pub fn apply(&self, cfg: &mut SynthConfig) {
        overlay!(
            self,
            cfg,
            pool_size,
            prims_per_class,
            shared,
            distractors,
            sigma,
            dim,
            base_classes,
            sessions,
            classes_per_session,
            shots,
            base_train_per_class,
            test_per_class,
            seed
        );
    }
}

pub const SYNTH_PRESETS: [&str; 2] = ["synth-default", "synth-small"];

fn synth_preset(name: &str) -> Result<SynthConfig, CliError> {
    match name {
        "synth-default" => Ok(SynthConfig::default()),
        "synth-small" => Ok(SynthConfig {
            pool_size: 16,
            base_classes: 6,
            sessions: 2,
            classes_per_session: 2,
            base_train_per_class: 12,
            test_per_class: 10,
            dim: 12,
            ..SynthConfig::default()
        }),
        other => Err(CliError::Usage(format!(
            "unknown synthetic preset {other:?} (expected one of {})",
            SYNTH_PRESETS.join(", ")
        ))),
    }
}

fn hp_preset(name: &str) -> Result<Preset, CliError> {
    Preset::parse(name).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown preset {name:?} (expected miniimagenet-like, cifar-like or cub-like)"
        ))
    })
}

/// Preset and config-file flags common to every configurable subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Named preset applied on top of the built-in defaults
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML file with `preset`, `[hyperparams]` and `[synth]` tables
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
}

impl ConfigArgs {
    fn file(&self) -> Result<ConfigFile, CliError> {
        self.config
            .as_deref()
            .map_or_else(|| Ok(ConfigFile::default()), ConfigFile::load)
    }

    fn preset_name(&self, file: &ConfigFile) -> Option<String> {
        self.preset.clone().or_else(|| file.preset.clone())
    }

    pub fn hyperparams(
        &self,
        base: Hyperparams,
        flags: &HpOverrides,
    ) -> Result<Hyperparams, CliError> {
        let file = self.file()?;
        let mut hp = base;
        if let Some(name) = self.preset_name(&file) {
            hp_preset(&name)?.apply(&mut hp);
        }
        file.hyperparams.apply(&mut hp);
        flags.apply(&mut hp);
        hp.validate().map_err(CliError::from)?;
        Ok(hp)
    }

    pub fn synth(&self, flags: &SynthOverrides) -> Result<SynthConfig, CliError> {
        let file = self.file()?;
        let mut cfg = match self.preset_name(&file) {
            Some(name) => synth_preset(&name)?,
            None => SynthConfig::default(),
        };
        file.synth.apply(&mut cfg);
        flags.apply(&mut cfg);
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }
}
