//! Experiment configuration: TOML-loadable, hashable, profile-aware.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{AdaptationConfig, Augmentation, ParamScope};
use crate::data::{default_centers, CenterShiftParams, SynthGeometry};
use crate::ensemble::NormPolicy;
use crate::error::{Error, Result};
use crate::nn::{EncoderArch, NormKind};

/// Evaluation/training recipe selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Resnet10,
    Ensemble,
    EnsembleMi,
    EnsembleMe,
    Denem,
    Tent,
    Memo,
}

impl Method {
    /// Ablation grid rows, in report order.
    pub fn ablation_rows() -> [Method; 5] {
        [
            Method::Resnet10,
            Method::Ensemble,
            Method::EnsembleMi,
            Method::EnsembleMe,
            Method::Denem,
        ]
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Resnet10 => "resnet10",
            Method::Ensemble => "ensemble",
            Method::EnsembleMi => "ensemble_mi",
            Method::EnsembleMe => "ensemble_me",
            Method::Denem => "denem",
            Method::Tent => "tent",
            Method::Memo => "memo",
        }
    }

    pub fn uses_ensemble(self) -> bool {
        matches!(
            self,
            Method::Ensemble | Method::EnsembleMi | Method::EnsembleMe | Method::Denem
        )
    }

    pub fn trains_with_mi(self) -> bool {
        matches!(self, Method::EnsembleMi | Method::Denem)
    }

    pub fn adapts(self) -> bool {
        matches!(
            self,
            Method::EnsembleMe | Method::Denem | Method::Tent | Method::Memo
        )
    }

    /// Methods sharing a training recipe share checkpoints.
    pub fn train_key(self) -> &'static str {
        match self {
            Method::Resnet10 | Method::Tent | Method::Memo => "single",
            Method::Ensemble | Method::EnsembleMe => "ensemble_ce",
            Method::EnsembleMi | Method::Denem => "ensemble_mi",
        }
    }

    /// Default adaptation parameter scope.
    pub fn default_scope(self) -> ParamScope {
        match self {
            Method::Tent => ParamScope::NormAffineOnly,
            _ => ParamScope::All,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet10" => Ok(Method::Resnet10),
            "ensemble" => Ok(Method::Ensemble),
            "ensemble_mi" => Ok(Method::EnsembleMi),
            "ensemble_me" => Ok(Method::EnsembleMe),
            "denem" => Ok(Method::Denem),
            "tent" => Ok(Method::Tent),
            "memo" => Ok(Method::Memo),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub norm: NormKind,
    pub num_groups: usize,
    pub ensemble_size: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            norm: NormKind::Group,
            num_groups: 8,
            ensemble_size: 5,
            num_classes: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Per-profile default when absent: 10 desk-scale epochs, 50 full-scale.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    /// Per-profile default when absent: 1e-3 desk-scale, 1e-4 full-scale.
    pub lr: Option<f64>,
    pub warmup_frac: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 10.0,
            epochs: None,
            batch_size: 32,
            lr: None,
            warmup_frac: 0.05,
            val_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub lr_adapt: f64,
    pub steps: usize,
    pub lambda_adapt: f64,
    /// Defaults to the method's own convention when absent.
    pub param_scope: Option<ParamScope>,
    pub augmentations: Vec<String>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr_adapt: 1e-2,
            steps: 5,
            lambda_adapt: 10.0,
            param_scope: None,
            augmentations: vec!["horizontal_flip".into(), "vertical_flip".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_patients: usize,
    pub cores_per_patient: usize,
    pub cancer_rate: f64,
    /// Defaults to the built-in five-center roster when absent.
    pub centers: Option<Vec<CenterShiftParams>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_patients: 20,
            cores_per_patient: 2,
            cancer_rate: 0.35,
            centers: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub workers: usize,
    pub desk_scale: bool,
    /// Adds the batch-vs-group norm comparison section to ablation output.
    pub norm_compare: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Denem,
            seed: 0,
            dataset: PathBuf::from("out/dataset"),
            out: PathBuf::from("out/run"),
            workers: 1,
            desk_scale: true,
            norm_compare: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.method.uses_ensemble() && self.model.ensemble_size < 2 {
            return Err(Error::Config(format!(
                "method {} needs ensemble_size >= 2",
                self.method.label()
            )));
        }
        if self.model.num_classes != 2 {
            return Err(Error::Config("binary classification only".into()));
        }
        if matches!(self.model.norm, NormKind::Group) {
            for w in self.arch().widths {
                if w % self.model.num_groups != 0 {
                    return Err(Error::Config(format!(
                        "num_groups {} does not divide width {w}",
                        self.model.num_groups
                    )));
                }
            }
        }
        if self.method == Method::Memo && self.adapt.augmentations.is_empty() {
            return Err(Error::Config(
                "augmentation-marginal adaptation needs at least one augmentation".into(),
            ));
        }
        self.augmentations()?;
        if self.method.adapts() {
            self.adaptation_config()?;
        }
        if !(0.0..=1.0).contains(&self.data.cancer_rate) {
            return Err(Error::Config("cancer_rate must lie in [0, 1]".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> EncoderArch {
        if self.desk_scale {
            EncoderArch::desk()
        } else {
            EncoderArch::full()
        }
    }

    pub fn geometry(&self) -> SynthGeometry {
        if self.desk_scale {
            SynthGeometry::desk()
        } else {
            SynthGeometry::full()
        }
    }

    pub fn norm_policy(&self) -> NormPolicy {
        NormPolicy {
            kind: self.model.norm,
            num_groups: self.model.num_groups,
        }
    }

    pub fn centers(&self) -> Vec<CenterShiftParams> {
        self.data.centers.clone().unwrap_or_else(default_centers)
    }

    pub fn epochs(&self) -> usize {
        self.train.epochs.unwrap_or(if self.desk_scale { 10 } else { 50 })
    }

    pub fn lr(&self) -> f64 {
        self.train.lr.unwrap_or(if self.desk_scale { 1e-3 } else { 1e-4 })
    }

    /// Ensemble size used by the current method (baselines run one member).
    pub fn effective_members(&self) -> usize {
        if self.method.uses_ensemble() {
            self.model.ensemble_size
        } else {
            1
        }
    }

    pub fn training_lambda(&self) -> f64 {
        if self.method.trains_with_mi() {
            self.train.lambda
        } else {
            0.0
        }
    }

    pub fn augmentations(&self) -> Result<Vec<Augmentation>> {
        crate::adaptation::parse_augmentations(&self.adapt.augmentations)
    }

    pub fn adaptation_config(&self) -> Result<AdaptationConfig> {
        let scope = self.adapt.param_scope.unwrap_or(self.method.default_scope());
        let lambda = match self.method {
            Method::Denem => self.adapt.lambda_adapt,
            // Marginal entropy only.
            _ => 0.0,
        };
        AdaptationConfig::new(self.adapt.lr_adapt, self.adapt.steps, lambda, scope)
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn config_hash(&self) -> Result<String> {
        let toml = self.to_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(toml.as_bytes());
        let digest = hasher.finalize();
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
