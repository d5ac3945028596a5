//! Run configuration: a flat JSON object whose keys mirror the CLI flags.
//!
//! Every model field is optional; unset fields fall back to the variant's
//! preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_VOCAB_CAP;
use crate::error::{Error, Result};
use crate::masking::CtScheme;
use crate::models::{ModelConfig, ModelVariant};
use crate::params::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: String,
    pub m_shared: Option<usize>,
    pub n_context: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub hidden: Option<usize>,
    pub heads: Option<usize>,
    pub embed: Option<usize>,
    pub ffn_inner: Option<usize>,
    pub dropout: Option<f64>,
    pub ct_scheme: Option<CtScheme>,
    pub pe_reinjection: bool,
    pub max_context_len: usize,
    pub vocab_cap: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub strict_bounds: bool,
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub act_labels: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            variant: "HIER".into(),
            m_shared: None,
            n_context: None,
            decoder_layers: None,
            hidden: None,
            heads: None,
            embed: None,
            ffn_inner: None,
            dropout: None,
            ct_scheme: None,
            pe_reinjection: true,
            max_context_len: 512,
            vocab_cap: DEFAULT_VOCAB_CAP,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            epochs: 30,
            patience: 3,
            batch_size: 16,
            seed: 0,
            strict_bounds: false,
            corpus: None,
            checkpoint: None,
            output: None,
            log: None,
            act_labels: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// A small, fast configuration for desk-scale runs and tests.
    pub fn tiny(variant: ModelVariant, hidden: usize) -> Self {
        let p = variant.preset();
        Self {
            variant: variant.name().into(),
            m_shared: Some(p.m_shared.min(1)),
            n_context: Some(p.n_context.min(1)),
            decoder_layers: Some(1),
            hidden: Some(hidden),
            heads: Some(2),
            embed: Some(hidden),
            ffn_inner: Some(2 * hidden),
            dropout: Some(0.0),
            ..Self::default()
        }
    }

    pub fn variant(&self) -> Result<ModelVariant> {
        self.variant.parse()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// The model configuration for a vocabulary of `vocab_size` and acts of `act_dim`.
    pub fn model_config(&self, vocab_size: usize, act_dim: usize) -> Result<ModelConfig> {
        let variant = self.variant()?;
        let mut cfg = ModelConfig::preset(variant, vocab_size);
        let e = &mut cfg.encoder;
        e.m_shared = self.m_shared.unwrap_or(e.m_shared);
        e.n_context = self.n_context.unwrap_or(e.n_context);
        e.hidden = self.hidden.unwrap_or(e.hidden);
        e.heads = self.heads.unwrap_or(e.heads);
        e.embed = self.embed.unwrap_or(e.embed);
        e.ffn_inner = self.ffn_inner.unwrap_or(e.hidden);
        e.dropout = self.dropout.unwrap_or(e.dropout);
        e.ct_scheme = self.ct_scheme.unwrap_or(e.ct_scheme);
        e.pe_reinjection = self.pe_reinjection;
        cfg.decoder_layers = self.decoder_layers.unwrap_or(cfg.decoder_layers);
        cfg.act_dim = act_dim;
        cfg.max_context_len = self.max_context_len;
        cfg.validate(self.strict_bounds)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.lr) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !positive(self.eps) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if self.vocab_cap <= crate::corpus::RESERVED.len() {
            return Err(Error::Config(format!("vocab_cap {} too small", self.vocab_cap)));
        }
        Ok(())
    }
}
