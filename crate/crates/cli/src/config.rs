//! Run configuration: a sectioned `key = value` (TOML) file plus flag overrides.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use amcf::data::{self, SplitFractions};
use amcf::model::{AttentionMode, Hyper, MaskMode};
use amcf::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Ml100k,
    Ml1m,
}

impl DatasetKind {
    fn dir_name(self) -> &'static str {
        match self {
            Self::Ml100k => "ml-100k",
            Self::Ml1m => "ml-1m",
        }
    }

    /// Ratings and metadata file names inside the dataset directory.
    pub fn files(self) -> (&'static str, &'static str) {
        match self {
            Self::Ml100k => ("u.data", "u.item"),
            Self::Ml1m => ("ratings.dat", "movies.dat"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Directory holding the dataset files; defaults to `$AMCF_DATA_ROOT/<ml-100k|ml-1m>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let f = SplitFractions::default();
        Self {
            train: f.train,
            validation: f.validation,
            test: f.test,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub attn_mode: AttentionMode,
    pub mask_mode: MaskMode,
    pub freeze_attention: bool,
    pub max_rating: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let h = Hyper::default();
        Self {
            dim: h.dim,
            attn_mode: h.attn_mode,
            mask_mode: h.mask_mode,
            freeze_attention: h.freeze_attention,
            max_rating: h.max_rating,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// `(M, K)` pairs for TM@K / BM@K.
    pub pairs: Vec<(usize, usize)>,
    pub lr_ridge: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pairs: amcf::eval::DEFAULT_PAIRS.to_vec(),
            lr_ridge: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    pub output: OutputSection,
}

/// Command-line overrides; `None` leaves the file's value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub dim: Option<usize>,
    pub attn_mode: Option<AttentionMode>,
    pub mask_mode: Option<MaskMode>,
    pub no_shield: bool,
    pub output: Option<PathBuf>,
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config(format!("{field}: {}", message.into()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    /// Reads, resolves paths, applies overrides and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base)?;
        cfg.apply(overrides, &base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) -> Result<(), CliError> {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.dataset.path = Some(match &self.dataset.path {
            Some(p) => join(p),
            None => data::data_root()
                .map(|root| root.join(self.dataset.kind.dir_name()))
                .ok_or_else(|| invalid("dataset.path", format!("not set and {} is unset", data::DATA_ROOT_ENV)))?,
        });
        self.output.dir = join(&self.output.dir);
        Ok(())
    }

    fn apply(&mut self, o: &Overrides, _base: &Path) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.split.seed = seed;
        }
        if let Some(lambda) = o.lambda {
            self.train.lambda = lambda;
        }
        if let Some(dim) = o.dim {
            self.model.dim = dim;
        }
        if let Some(mode) = o.attn_mode {
            self.model.attn_mode = mode;
        }
        if let Some(mode) = o.mask_mode {
            self.model.mask_mode = mode;
        }
        if o.no_shield {
            self.train.shield = false;
        }
        if let Some(dir) = &o.output {
            self.output.dir = dir.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| match e {
            amcf::training::TrainError::InvalidConfig { field, message } => invalid(&format!("train.{field}"), message),
            other => CliError::Config(other.to_string()),
        })?;
        self.fractions()?;
        if self.model.dim == 0 {
            return Err(invalid("model.dim", "must be positive"));
        }
        if !(self.model.max_rating.is_finite() && self.model.max_rating > 1.0) {
            return Err(invalid("model.max_rating", "must be greater than 1"));
        }
        if !(self.eval.lr_ridge.is_finite() && self.eval.lr_ridge >= 0.0) {
            return Err(invalid("eval.lr_ridge", "must be non-negative"));
        }
        if self.eval.pairs.is_empty() {
            return Err(invalid("eval.pairs", "must list at least one (M, K) pair"));
        }
        if let Some(&(m, k)) = self.eval.pairs.iter().find(|&&(m, k)| m == 0 || m > k) {
            return Err(invalid("eval.pairs", format!("need 1 <= M <= K, got ({m}, {k})")));
        }
        Ok(())
    }

    pub fn fractions(&self) -> Result<SplitFractions, CliError> {
        SplitFractions::new(self.split.train, self.split.validation, self.split.test)
            .map_err(|e| invalid("split", e.to_string()))
    }

    pub fn dataset_dir(&self) -> &Path {
        self.dataset.path.as_deref().expect("resolved on load")
    }

    pub fn hyper(&self, aspects: usize) -> Hyper {
        Hyper {
            dim: self.model.dim,
            aspects,
            lambda: self.train.lambda,
            mask_mode: self.model.mask_mode,
            attn_mode: self.model.attn_mode,
            freeze_attention: self.model.freeze_attention,
            max_rating: self.model.max_rating,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over everything that determines the trained model: dataset
    /// kind, split, model and training sections. Paths and eval settings are
    /// left out.
    pub fn training_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            kind: DatasetKind,
            split: &'a SplitSection,
            model: &'a ModelSection,
            train: &'a TrainConfig,
        }
        let key = Key {
            kind: self.dataset.kind,
            split: &self.split,
            model: &self.model,
            train: &self.train,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("key serializes")))
    }
}
