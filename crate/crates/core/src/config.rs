//! Run configuration.
//!
//! Every section has defaults for the desk-scale setting; a TOML file only
//! needs to name the values it changes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
}

impl ModalitySpec {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            dim,
        }
    }
}

/// Pose, depth, panoptic mask, optical flow and text, 32 wide each.
pub fn default_modalities() -> Vec<ModalitySpec> {
    ["P", "D", "M", "O", "txt"]
        .iter()
        .map(|n| ModalitySpec::new(n, 32))
        .collect()
}

/// Architecture hyperparameters shared by teacher and student.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// RGB snippet feature width.
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Width of the shared pseudo-modality latent.
    pub latent_dim: usize,
    /// Number of backbone transformer blocks.
    pub blocks: usize,
    /// Block whose output feeds the early inductor (1-based).
    pub early_site: usize,
    pub late_site: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Transformer blocks inside each cross-modal induction stack.
    pub cmi_blocks: usize,
    pub pmg_kernel: usize,
    pub positional_encoding: bool,
    pub modalities: Vec<ModalitySpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden_dim: 64,
            latent_dim: 16,
            blocks: 4,
            early_site: 1,
            late_site: 3,
            heads: 4,
            ffn_mult: 2,
            cmi_blocks: 2,
            pmg_kernel: 3,
            positional_encoding: false,
            modalities: default_modalities(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [
            self.input_dim,
            self.hidden_dim,
            self.latent_dim,
            self.heads,
            self.ffn_mult,
            self.pmg_kernel,
        ]
        .contains(&0)
        {
            return bad("model dimensions must be positive".into());
        }
        if !(1 <= self.early_site
            && self.early_site < self.late_site
            && self.late_site < self.blocks)
        {
            return bad(format!(
                "inductor sites must satisfy 1 <= early ({}) < late ({}) <= blocks - 1 ({})",
                self.early_site,
                self.late_site,
                self.blocks.saturating_sub(1)
            ));
        }
        if self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        if self.cmi_blocks < 2 {
            return bad("cmi_blocks must be at least 2".into());
        }
        if self.pmg_kernel % 2 == 0 {
            return bad("pmg_kernel must be odd".into());
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("modality names must be unique".into());
        }
        if self
            .modalities
            .iter()
            .any(|m| m.dim == 0 || m.name.is_empty())
        {
            return bad("modalities need a name and a positive dim".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the architecture.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("model config serializes");
        Sha256::digest(json.as_bytes()).into()
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.name.clone()).collect()
    }
}

/// How top-k is sized for the video-level score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopK {
    /// `k = floor(T / n) + 1`, capped at `T`.
    FloorDivPlusOne(usize),
    Fixed(usize),
}

impl TopK {
    pub fn k(self, t: usize) -> usize {
        match self {
            TopK::FloorDivPlusOne(n) => (t / n.max(1) + 1).min(t),
            TopK::Fixed(k) => k.min(t),
        }
    }
}

/// Loss weights plus switches for the auxiliary terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub top_k: TopK,
    pub use_pmg: bool,
    pub use_align: bool,
    pub use_distill: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            tau: 0.07,
            top_k: TopK::FloorDivPlusOne(16),
            use_pmg: true,
            use_align: true,
            use_distill: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        for (n, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{n} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalitySource {
    /// Pseudo-modalities generated from RGB.
    #[default]
    Pseudo,
    /// Modality embeddings supplied with the video.
    Real,
}

impl FromStr for ModalitySource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pseudo" => Ok(Self::Pseudo),
            "real" => Ok(Self::Real),
            other => Err(format!("unknown modality source `{other}` (pseudo|real)")),
        }
    }
}

impl fmt::Display for ModalitySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pseudo => "pseudo",
            Self::Real => "real",
        })
    }
}

/// Which inductor sites inject into the student.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteSelection {
    Early,
    Late,
    #[default]
    Both,
}

impl SiteSelection {
    pub fn early(self) -> bool {
        matches!(self, Self::Early | Self::Both)
    }

    pub fn late(self) -> bool {
        matches!(self, Self::Late | Self::Both)
    }
}

impl FromStr for SiteSelection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "early" => Ok(Self::Early),
            "late" => Ok(Self::Late),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown site `{other}` (early|late|both)")),
        }
    }
}

impl fmt::Display for SiteSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Early => "early",
            Self::Late => "late",
            Self::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_pretrain: usize,
    pub epochs_warmup: usize,
    pub epochs_main: usize,
    pub batch_normals: usize,
    pub batch_anomalies: usize,
    pub lr_pretrain: f64,
    pub lr_warmup: f64,
    pub lr_main: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub modality_source: ModalitySource,
    pub sites: SiteSelection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_pretrain: 30,
            epochs_warmup: 10,
            epochs_main: 50,
            batch_normals: 4,
            batch_anomalies: 4,
            lr_pretrain: 1e-3,
            lr_warmup: 1e-3,
            lr_main: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            modality_source: ModalitySource::Pseudo,
            sites: SiteSelection::Both,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("epochs_pretrain", self.epochs_pretrain),
            ("epochs_warmup", self.epochs_warmup),
            ("epochs_main", self.epochs_main),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{n} must be at least 1")));
            }
        }
        if self.batch_normals == 0 || self.batch_anomalies == 0 {
            return Err(Error::Config(
                "batches need at least one normal and one anomalous video".into(),
            ));
        }
        for (n, v) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_warmup", self.lr_warmup),
            ("lr_main", self.lr_main),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{n} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Complete run configuration as read from a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: SynthConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        Ok(())
    }
}
