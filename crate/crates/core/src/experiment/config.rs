use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackConfig;
use crate::data::{SteganoSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::models::{Activation, Family, Model, ModelSpec, TrainConfig};
use crate::spectral::LowRegion;

/// Environment variable that replaces the artifact root.
pub const ARTIFACT_ROOT_ENV: &str = "FREQBIAS_ARTIFACTS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synth(SynthConfig),
    /// CIFAR-10 binary batches under `path`.
    Cifar {
        path: PathBuf,
        #[serde(default)]
        grayscale: bool,
        #[serde(default)]
        downsample: bool,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

/// A named shortcut injection applied to both splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(flatten)]
    pub spec: SteganoSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Fc,
    Lc,
    Fwc,
    Bwc,
}

/// Fields left unset fall back to the experiment's `[train]` table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOverride {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub stop_at_accuracy: Option<f64>,
}

impl TrainOverride {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            lr: self.lr.unwrap_or(base.lr),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            decay: self.decay.unwrap_or(base.decay),
            clip_norm: self.clip_norm.or(base.clip_norm),
            stop_at_accuracy: self.stop_at_accuracy.or(base.stop_at_accuracy),
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelEntry {
    Preset {
        family: FamilyName,
        /// Receptive field for `lc` and `bwc`.
        #[serde(default)]
        k: Option<usize>,
        #[serde(default = "one")]
        hidden: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        init_scale: Option<f64>,
        #[serde(default)]
        train: TrainOverride,
    },
    Vit {
        patch: usize,
        #[serde(default = "yes")]
        shared: bool,
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        train: TrainOverride,
    },
    Custom {
        spec: ModelSpec,
        #[serde(default)]
        train: TrainOverride,
    },
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ModelEntry {
    pub fn resolve(&self, input: [usize; 3], classes: usize) -> Result<ModelSpec> {
        let spec = match self {
            ModelEntry::Preset {
                family,
                k,
                hidden,
                activation,
                name,
                init_scale,
                ..
            } => {
                let need_k = || k.ok_or_else(|| Error::Config(format!("{family:?} needs a kernel size `k`")));
                let fam = match family {
                    FamilyName::Fc => Family::Fc,
                    FamilyName::Fwc => Family::Fwc,
                    FamilyName::Lc => Family::Lc { k: need_k()? },
                    FamilyName::Bwc => Family::Bwc { k: need_k()? },
                };
                let mut s = ModelSpec::preset(fam, input, classes, *hidden, *activation);
                if let Some(n) = name {
                    s.name = n.clone();
                }
                if let Some(sc) = init_scale {
                    s.init_scale = *sc;
                }
                s
            }
            ModelEntry::Vit { patch, shared, name, .. } => {
                let mut s = ModelSpec::mini_vit(input, classes, *patch, *shared);
                if let Some(n) = name {
                    s.name = n.clone();
                }
                s
            }
            ModelEntry::Custom { spec, .. } => spec.clone(),
        };
        if spec.input != input || spec.classes != classes {
            return Err(Error::Config(format!(
                "{}: model expects {:?} / {} classes, dataset has {input:?} / {classes}",
                spec.name, spec.input, spec.classes
            )));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_override(&self) -> &TrainOverride {
        match self {
            ModelEntry::Preset { train, .. } | ModelEntry::Vit { train, .. } | ModelEntry::Custom { train, .. } => train,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    /// Train and test accuracy at the selected epoch.
    Accuracy,
    /// Mean magnitude spectra of perturbations and of the predictor.
    Spectra,
    /// Perturbation norms and Fourier-domain sparsity norms.
    Norms,
    /// Energy outside the low-frequency square, per layer for linear stacks.
    Kappa,
    /// Rank correlation between predictor and perturbation spectra.
    Spearman,
    /// Radial and angular energy profiles of perturbation spectra.
    Profiles,
    /// Perturbation spectra and norms across training checkpoints.
    Dynamics,
}

impl Analysis {
    pub fn needs_attack(self) -> bool {
        matches!(
            self,
            Analysis::Spectra | Analysis::Norms | Analysis::Spearman | Analysis::Profiles | Analysis::Dynamics
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSettings {
    /// Test examples attacked per unit; all of them when unset.
    #[serde(default)]
    pub attack_examples: Option<usize>,
    /// Width of the low-frequency square for `kappa_high`.
    #[serde(default = "default_kappa_k")]
    pub kappa_k: f64,
    #[serde(default)]
    pub region: LowRegion,
    /// Checkpoints to attack for dynamics; every epoch when unset.
    #[serde(default)]
    pub dynamics_epochs: Option<Vec<usize>>,
    /// Index into `attacks` used for dynamics.
    #[serde(default)]
    pub dynamics_attack: usize,
    #[serde(default = "yes")]
    pub save_models: bool,
}

fn default_kappa_k() -> f64 {
    7.0
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            attack_examples: None,
            kappa_k: default_kappa_k(),
            region: LowRegion::Square,
            dynamics_epochs: None,
            dynamics_attack: 0,
            save_models: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub trials: usize,
    /// Artifact directory; defaults to `artifacts/<name>`.
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub dataset: DatasetSpec,
    /// Shortcut injections; each one is a separate dataset variant.
    #[serde(default)]
    pub inject: Vec<Variant>,
    pub models: Vec<ModelEntry>,
    pub train: TrainConfig,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    pub analyses: Vec<Analysis>,
    #[serde(default)]
    pub settings: AnalysisSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Input shape and class count the models will see.
    pub fn data_shape(&self) -> Result<([usize; 3], usize)> {
        match &self.dataset {
            DatasetSpec::Synth(s) => Ok(([s.channels, s.size, s.size], s.classes)),
            DatasetSpec::Cifar { grayscale, downsample, .. } => {
                let c = if *grayscale { 1 } else { 3 };
                let n = if *downsample { 16 } else { 32 };
                Ok(([c, n, n], 10))
            }
        }
    }

    pub fn model_specs(&self) -> Result<Vec<ModelSpec>> {
        let (input, classes) = self.data_shape()?;
        self.models.iter().map(|m| m.resolve(input, classes)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name must be a plain non-empty string".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        if self.analyses.is_empty() {
            return bad("at least one analysis is required".into());
        }
        if let DatasetSpec::Synth(s) = &self.dataset {
            s.validate()?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.inject {
            v.spec.validate()?;
            if !seen.insert(v.name.clone()) || v.name.contains(['/', '\\']) {
                return bad(format!("variant name `{}` is duplicated or not a plain name", v.name));
            }
        }
        self.train.validate()?;
        let specs = self.model_specs()?;
        let mut names = std::collections::BTreeSet::new();
        for (entry, spec) in self.models.iter().zip(&specs) {
            if !names.insert(spec.name.clone()) {
                return bad(format!("duplicate model name `{}`", spec.name));
            }
            entry.train_override().apply(&self.train).validate()?;
            // Catches shape errors (kernel wider than input, bad patch size).
            Model::build(spec, 0)?;
        }
        for a in &self.attacks {
            a.validate()?;
        }
        if self.analyses.iter().any(|a| a.needs_attack()) && self.attacks.is_empty() {
            return bad("the selected analyses need at least one attack".into());
        }
        if self.analyses.contains(&Analysis::Dynamics) && self.settings.dynamics_attack >= self.attacks.len() {
            return bad(format!("dynamics_attack {} out of range", self.settings.dynamics_attack));
        }
        let (input, _) = self.data_shape()?;
        if self.analyses.contains(&Analysis::Kappa) && !(self.settings.kappa_k >= 0.0 && self.settings.kappa_k < input[1] as f64) {
            return bad(format!("kappa_k {} must lie in [0, {})", self.settings.kappa_k, input[1]));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::data::hex(&Sha256::digest(json)[..8])
    }

    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(ARTIFACT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.name),
            None => self.output.clone().unwrap_or_else(|| Path::new("artifacts").join(&self.name)),
        }
    }
}
