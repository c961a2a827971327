//! Run configuration: one JSON document whose every field is explicit once
//! serialized, and whose SHA-256 is stamped into produced artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::LogFormat;
use crate::error::{Error, Result};
use crate::evalharness::EvalConfig;
use crate::glpf::PolyFilterSpec;
use crate::model::{ModelConfig, SkipGramConfig, TrainConfig};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "FREQLAB_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub format: LogFormat,
    pub min_interactions: usize,
    pub max_seq_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: LogFormat::Tsv,
            min_interactions: 5,
            max_seq_len: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub d_text: usize,
    pub seed: u64,
    /// Vectors produced elsewhere, used instead of the hashed surrogate.
    pub external: Option<PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            d_text: 50,
            seed: 5,
            external: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlpfConfig {
    pub enabled: bool,
    pub alpha: f64,
    /// Explicit `θ_0..θ_K`; overrides `alpha` when present.
    pub coefficients: Option<Vec<f64>>,
    pub binarize: bool,
}

impl Default for GlpfConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 0.3,
            coefficients: None,
            binarize: true,
        }
    }
}

impl GlpfConfig {
    pub fn spec(&self) -> Result<PolyFilterSpec> {
        match &self.coefficients {
            Some(c) => PolyFilterSpec::new(c.clone()),
            None => PolyFilterSpec::first_order(self.alpha),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub skipgram: SkipGramConfig,
    pub text: TextConfig,
    pub glpf: GlpfConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub n_bands: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            skipgram: SkipGramConfig::default(),
            text: TextConfig::default(),
            glpf: GlpfConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            n_bands: 4,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fully explicit form, defaults included.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).unwrap()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::input(m));
        if self.skipgram.dim != self.model.d_id {
            return bad(format!(
                "skipgram.dim {} differs from model.d_id {}",
                self.skipgram.dim, self.model.d_id
            ));
        }
        if self.text.d_text != self.model.d_text {
            return bad(format!(
                "text.d_text {} differs from model.d_text {}",
                self.text.d_text, self.model.d_text
            ));
        }
        if self.data.min_interactions < 3 || self.data.max_seq_len < 3 {
            return bad("data.min_interactions and data.max_seq_len must be at least 3".into());
        }
        if self.n_bands == 0 || self.eval.k == 0 || self.eval.n_candidates == 0 {
            return bad("n_bands, eval.k and eval.n_candidates must be positive".into());
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return bad("train.batch_size and train.lr must be positive".into());
        }
        self.model.tfm.spec.validate()?;
        self.glpf.spec()?;
        Ok(())
    }

    /// Sets the dotted `path` (e.g. `train.lr`) to `value`, read as JSON when
    /// it parses and as a string otherwise.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = slot
                .get_mut(key)
                .ok_or_else(|| Error::input(format!("unknown config path `{path}`")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self = serde_json::from_value(root).map_err(|e| Error::input(format!("{path}: {e}")))?;
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"lr": 0.0005}, "n_bands": 2}"#).unwrap();
        assert_eq!(cfg.train.lr, 5e-4);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.n_bands, 2);
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn rejects_typos_and_inconsistency() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"text": {"d_text": 8}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"glpf": {"alpha": 2.0}}"#).is_err());
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = RunConfig::default();
        cfg.set("model.tfm.spec.cutoff", "0.5").unwrap();
        cfg.set("data.path", "/tmp/x.tsv").unwrap();
        assert_eq!(cfg.model.tfm.spec.cutoff, 0.5);
        assert_eq!(cfg.data.path.as_deref(), Some(Path::new("/tmp/x.tsv")));
        assert!(cfg.set("model.nope", "1").is_err());
        assert!(cfg.set("train.batch_size", "\"many\"").is_err());
    }
}
