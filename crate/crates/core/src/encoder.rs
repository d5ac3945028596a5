//! The hierarchical transformer encoder.
//!
//! An HT-Encoder is an ordinary `(M + N)`-layer transformer encoder run
//! with a mask schedule: the first `M` layers (the shared utterance
//! encoder) see only the UT-Mask, so each utterance is encoded on its own;
//! the last `N` layers (the context encoder) see a CT-Mask. Local
//! positional encodings enter at the input, global ones are re-injected
//! between the two phases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::masking::{build_ct_mask, build_ut_mask, global_pe, AttentionMask, CtScheme, UtteranceLayout};
use crate::nn::{EncoderLayer, Linear};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Search ranges used when strict bound validation is requested.
pub mod bounds {
    pub const NHEAD: (usize, usize) = (2, 8);
    pub const EMBEDDING_PER_HEAD: (f64, f64) = (25.0, 40.0);
    pub const NHID_PER_HEAD: (f64, f64) = (10.0, 40.0);
    pub const LAYERS: (usize, usize) = (2, 6);
    pub const DROPOUT: (f64, f64) = (0.05, 0.8);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HtEncoderConfig {
    /// Layers in the shared utterance encoder (`M`).
    pub m_shared: usize,
    /// Layers in the context encoder (`N`).
    pub n_context: usize,
    pub hidden: usize,
    pub heads: usize,
    pub embed: usize,
    pub ffn_inner: usize,
    pub dropout: f64,
    pub ct_scheme: CtScheme,
    pub pe_reinjection: bool,
}

impl HtEncoderConfig {
    pub fn validate(&self, strict: bool) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.m_shared + self.n_context == 0 {
            return err("encoder needs at least one layer".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return err(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.hidden < 2 || self.embed == 0 || self.ffn_inner == 0 {
            return err("hidden must be ≥ 2, embed and ffn_inner ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if strict {
            check_usize("nhead", self.heads, bounds::NHEAD)?;
            check_f64("embedding_perhead", self.embed as f64 / self.heads as f64, bounds::EMBEDDING_PER_HEAD)?;
            check_f64("nhid_perhead", self.hidden as f64 / self.heads as f64, bounds::NHID_PER_HEAD)?;
            if self.m_shared > 0 {
                check_usize("nlayers_e1", self.m_shared, bounds::LAYERS)?;
            }
            if self.n_context > 0 {
                check_usize("nlayers_e2", self.n_context, bounds::LAYERS)?;
            }
            check_f64("dropout", self.dropout, bounds::DROPOUT)?;
        }
        Ok(())
    }

    pub fn total_layers(&self) -> usize {
        self.m_shared + self.n_context
    }

    /// Registers all encoder parameters under `enc.`.
    pub fn init_params<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        if self.embed != self.hidden {
            Linear::init(store, "enc.in_proj", self.embed, self.hidden, crate::nn::init_bound(self.hidden), rng)?;
        }
        for i in 0..self.m_shared {
            EncoderLayer::init(store, &shared_prefix(i), self.hidden, self.ffn_inner, rng)?;
        }
        for i in 0..self.n_context {
            EncoderLayer::init(store, &context_prefix(i), self.hidden, self.ffn_inner, rng)?;
        }
        Ok(())
    }
}

pub(crate) fn check_usize(name: &str, v: usize, (lo, hi): (usize, usize)) -> Result<()> {
    if v < lo || v > hi {
        return Err(Error::Config(format!("{name} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

pub(crate) fn check_f64(name: &str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if v < lo || v > hi {
        return Err(Error::Config(format!("{name} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

pub fn shared_prefix(i: usize) -> String {
    format!("enc.shared.layer{i}")
}

pub fn context_prefix(i: usize) -> String {
    format!("enc.context.layer{i}")
}

pub fn standard_prefix(i: usize) -> String {
    format!("enc.layer{i}")
}

/// Masks and positional encodings for one (possibly padded) context.
#[derive(Clone, Debug)]
pub struct MaskPlan {
    pub ut_mask: AttentionMask,
    pub ct_mask: AttentionMask,
    /// `[padded_len × embed]`, added at the input when `M > 0`.
    pub local_pe: Tensor,
    /// `[padded_len × hidden]`, added before the context phase.
    pub global_pe: Tensor,
}

impl MaskPlan {
    /// Masks for `layout` embedded into `padded_len` positions. Padding
    /// positions are invisible to real tokens and attend only themselves.
    pub fn new(layout: &UtteranceLayout, cfg: &HtEncoderConfig, padded_len: usize) -> Result<Self> {
        let len = layout.len();
        if padded_len < len {
            return Err(Error::shape("mask plan", format!("padded length {padded_len} < context length {len}")));
        }
        let ut = build_ut_mask(layout).pad_to(padded_len);
        let ct = build_ct_mask(layout, cfg.ct_scheme)?.pad_to(padded_len);
        let mut local = layout.local_position().to_vec();
        local.resize(padded_len, 0);
        Ok(Self {
            ut_mask: ut,
            ct_mask: ct,
            local_pe: crate::masking::sinusoidal_pe_any(&local, cfg.embed)?,
            global_pe: global_pe(padded_len, cfg.hidden)?,
        })
    }
}

/// Output of [`encode`].
#[derive(Clone, Debug)]
pub struct EncodedContext {
    /// Final hidden states, `[padded_len × hidden]`.
    pub hidden: Var,
    pub layout: UtteranceLayout,
    pub padded_len: usize,
    /// Output of every layer in order, captured only on request.
    pub layers: Vec<Tensor>,
}

impl EncodedContext {
    /// Output of the last UT-masked layer, if layers were captured and `M > 0`.
    pub fn phase1(&self, m_shared: usize) -> Option<&Tensor> {
        if m_shared == 0 {
            None
        } else {
            self.layers.get(m_shared - 1)
        }
    }
}

/// Encodes `embedded` (`[L × E]` token embeddings) under `layout`.
pub fn encode(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &HtEncoderConfig,
    embedded: Var,
    layout: &UtteranceLayout,
) -> Result<EncodedContext> {
    let rows = tape.value(embedded).rows();
    if rows != layout.len() {
        return Err(Error::shape("encode", format!("{rows} token rows for a {}-token layout", layout.len())));
    }
    encode_padded(tape, store, cfg, embedded, layout, false)
}

/// Like [`encode`] but `embedded` may carry trailing padding rows.
pub fn encode_padded(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &HtEncoderConfig,
    embedded: Var,
    layout: &UtteranceLayout,
    capture: bool,
) -> Result<EncodedContext> {
    let padded_len = tape.value(embedded).rows();
    let plan = MaskPlan::new(layout, cfg, padded_len)?;
    encode_with_plan(tape, store, cfg, embedded, layout, &plan, capture)
}

/// Runs the mask schedule with caller-supplied masks and encodings.
///
/// Local PE is only added when there is an utterance phase (`M > 0`);
/// global PE is added before the context phase when `pe_reinjection` is
/// set and `N > 0`.
pub fn encode_with_plan(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &HtEncoderConfig,
    embedded: Var,
    layout: &UtteranceLayout,
    plan: &MaskPlan,
    capture: bool,
) -> Result<EncodedContext> {
    let (rows, cols) = tape.value(embedded).dims2();
    if cols != cfg.embed {
        return Err(Error::shape("encode", format!("embedding width {cols}, expected {}", cfg.embed)));
    }
    if rows < layout.len() || plan.ut_mask.rows() != rows {
        return Err(Error::shape("encode", format!("{rows} rows for layout of {} tokens", layout.len())));
    }
    let mut x = embedded;
    if cfg.m_shared > 0 {
        let pe = tape.constant(plan.local_pe.clone())?;
        x = tape.add(x, pe)?;
    }
    if cfg.embed != cfg.hidden {
        x = Linear::load(tape, store, "enc.in_proj")?.forward(tape, x)?;
    }
    let mut layers = Vec::new();
    for i in 0..cfg.m_shared {
        let layer = EncoderLayer::load(tape, store, &shared_prefix(i), cfg.heads)?;
        x = layer.forward(tape, x, &plan.ut_mask)?;
        if capture {
            layers.push(tape.value(x).clone());
        }
    }
    if cfg.n_context > 0 && cfg.pe_reinjection {
        let pe = tape.constant(plan.global_pe.clone())?;
        x = tape.add(x, pe)?;
    }
    for i in 0..cfg.n_context {
        let layer = EncoderLayer::load(tape, store, &context_prefix(i), cfg.heads)?;
        x = layer.forward(tape, x, &plan.ct_mask)?;
        if capture {
            layers.push(tape.value(x).clone());
        }
    }
    Ok(EncodedContext {
        hidden: x,
        layout: layout.clone(),
        padded_len: rows,
        layers,
    })
}

/// One post-norm encoder layer under `mask`, parameters under `prefix`.
pub fn encoder_layer(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    heads: usize,
    x: Var,
    mask: &AttentionMask,
) -> Result<Var> {
    EncoderLayer::load(tape, store, prefix, heads)?.forward(tape, x, mask)
}

/// A plain transformer encoder: absolute PE at the input, one mask for
/// every layer (all ones unless given).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardEncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub embed: usize,
    pub ffn_inner: usize,
    pub dropout: f64,
}

impl StandardEncoderConfig {
    pub fn init_params<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        if self.embed != self.hidden {
            Linear::init(store, "enc.in_proj", self.embed, self.hidden, crate::nn::init_bound(self.hidden), rng)?;
        }
        for i in 0..self.layers {
            EncoderLayer::init(store, &standard_prefix(i), self.hidden, self.ffn_inner, rng)?;
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        embedded: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (len, cols) = tape.value(embedded).dims2();
        if cols != self.embed {
            return Err(Error::shape("standard encoder", format!("width {cols}, expected {}", self.embed)));
        }
        let full = AttentionMask::ones(len, len);
        let mask = mask.unwrap_or(&full);
        let pe = tape.constant(global_pe(len, self.embed)?)?;
        let mut x = tape.add(embedded, pe)?;
        if self.embed != self.hidden {
            x = Linear::load(tape, store, "enc.in_proj")?.forward(tape, x)?;
        }
        for i in 0..self.layers {
            x = encoder_layer(tape, store, &standard_prefix(i), self.heads, x, mask)?;
        }
        Ok(x)
    }
}

/// Relabels the parameters of a standard `(M + N)`-layer encoder into the
/// shared (first `M`) and context (last `N`) groups. Tensors are moved,
/// not copied or modified; only the run-time mask schedule changes.
pub fn convert_standard_encoder(
    standard: &StandardEncoderConfig,
    mut store: ParameterStore,
    m_shared: usize,
    n_context: usize,
    ct_scheme: CtScheme,
) -> Result<(HtEncoderConfig, ParameterStore)> {
    let present = (0..)
        .take_while(|&i| store.names().any(|n| n.starts_with(&format!("{}.", standard_prefix(i)))))
        .count();
    if standard.layers != m_shared + n_context || present != m_shared + n_context {
        return Err(Error::Conversion(format!(
            "standard encoder has {} layers ({} in the store), requested split {m_shared}+{n_context}",
            standard.layers, present
        )));
    }
    let mut mapping = Vec::new();
    for i in 0..standard.layers {
        let from = format!("{}.", standard_prefix(i));
        let to = if i < m_shared {
            format!("{}.", shared_prefix(i))
        } else {
            format!("{}.", context_prefix(i - m_shared))
        };
        for name in store.names().filter(|n| n.starts_with(&from)) {
            mapping.push((name.to_string(), format!("{to}{}", &name[from.len()..])));
        }
    }
    store.rename(&mapping)?;
    let cfg = HtEncoderConfig {
        m_shared,
        n_context,
        hidden: standard.hidden,
        heads: standard.heads,
        embed: standard.embed,
        ffn_inner: standard.ffn_inner,
        dropout: standard.dropout,
        ct_scheme,
        pe_reinjection: true,
    };
    Ok((cfg, store))
}
