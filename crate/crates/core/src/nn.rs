//! Transformer building blocks on top of the tape.
//!
//! Weights are stored `[in, out]` so a layer is `x · W + b`. Each block has
//! an `init` that registers its parameters under a name prefix and a
//! `load` that binds them onto a tape.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::masking::AttentionMask;
use crate::params::ParameterStore;

/// Weights start in `uniform(-1/sqrt(H), 1/sqrt(H))` for model width `H`.
pub fn init_bound(hidden: usize) -> f64 {
    1.0 / (hidden as f64).sqrt()
}

pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<()> {
        store.init_uniform(format!("{prefix}.w"), d_in, d_out, bound, rng)?;
        store.init_const(format!("{prefix}.b"), d_out, 0.0)
    }

    pub fn load(tape: &mut Tape, store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: tape.param(store, &format!("{prefix}.w"))?,
            b: tape.param(store, &format!("{prefix}.b"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_row(y, self.b)
    }
}

pub struct LayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn init(store: &mut ParameterStore, prefix: &str, h: usize) -> Result<()> {
        store.init_const(format!("{prefix}.gain"), h, 1.0)?;
        store.init_const(format!("{prefix}.bias"), h, 0.0)
    }

    pub fn load(tape: &mut Tape, store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: tape.param(store, &format!("{prefix}.gain"))?,
            bias: tape.param(store, &format!("{prefix}.bias"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias)
    }
}

/// Multi-head attention projections.
///
/// Keys have no bias: a key bias adds the same amount to every score in a
/// row, so softmax cancels it and its gradient is identically zero.
pub struct Attention {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, h: usize, rng: &mut R) -> Result<()> {
        let bound = init_bound(h);
        store.init_uniform(format!("{prefix}.wq"), h, h, bound, rng)?;
        store.init_const(format!("{prefix}.bq"), h, 0.0)?;
        store.init_uniform(format!("{prefix}.wk"), h, h, bound, rng)?;
        store.init_uniform(format!("{prefix}.wv"), h, h, bound, rng)?;
        store.init_const(format!("{prefix}.bv"), h, 0.0)?;
        Linear::init(store, &format!("{prefix}.out"), h, h, bound, rng)
    }

    pub fn load(tape: &mut Tape, store: &ParameterStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: tape.param(store, &format!("{prefix}.wq"))?,
            bq: tape.param(store, &format!("{prefix}.bq"))?,
            wk: tape.param(store, &format!("{prefix}.wk"))?,
            wv: tape.param(store, &format!("{prefix}.wv"))?,
            bv: tape.param(store, &format!("{prefix}.bv"))?,
            out: Linear::load(tape, store, &format!("{prefix}.out"))?,
            heads,
        })
    }

    /// Scaled dot-product attention per head under one shared mask; heads
    /// are concatenated and passed through the output projection.
    /// Dropout (when the tape has it) hits the attention weights.
    pub fn forward(&self, tape: &mut Tape, q_in: Var, k_in: Var, v_in: Var, mask: &AttentionMask) -> Result<Var> {
        let h = tape.value(q_in).cols();
        if self.heads == 0 || !h.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("hidden size {h} is not divisible by {} heads", self.heads)));
        }
        let dk = h / self.heads;
        let q = tape.matmul(q_in, self.wq)?;
        let q = tape.add_row(q, self.bq)?;
        let k = tape.matmul(k_in, self.wk)?;
        let v = tape.matmul(v_in, self.wv)?;
        let v = tape.add_row(v, self.bv)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (s, e) = (head * dk, (head + 1) * dk);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, s, e)?, tape.slice_cols(k, s, e)?, tape.slice_cols(v, s, e)?)
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.masked_softmax(scores, mask)?;
            let probs = tape.dropout(probs)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.out.forward(tape, cat)
    }
}

/// Two affine maps with a ReLU between them, applied per position.
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, h: usize, inner: usize, rng: &mut R) -> Result<()> {
        Linear::init(store, &format!("{prefix}.inner"), h, inner, init_bound(h), rng)?;
        Linear::init(store, &format!("{prefix}.outer"), inner, h, init_bound(h), rng)
    }

    pub fn load(tape: &mut Tape, store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            inner: Linear::load(tape, store, &format!("{prefix}.inner"))?,
            outer: Linear::load(tape, store, &format!("{prefix}.outer"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = self.inner.forward(tape, x)?;
        let a = tape.relu(a)?;
        let a = tape.dropout(a)?;
        self.outer.forward(tape, a)
    }
}

/// Post-norm encoder layer: self-attention, add & norm, FFN, add & norm.
pub struct EncoderLayer {
    pub attn: Attention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, h: usize, ffn_inner: usize, rng: &mut R) -> Result<()> {
        Attention::init(store, &format!("{prefix}.attn"), h, rng)?;
        LayerNorm::init(store, &format!("{prefix}.ln1"), h)?;
        FeedForward::init(store, &format!("{prefix}.ffn"), h, ffn_inner, rng)?;
        LayerNorm::init(store, &format!("{prefix}.ln2"), h)
    }

    pub fn load(tape: &mut Tape, store: &ParameterStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::load(tape, store, &format!("{prefix}.attn"), heads)?,
            ln1: LayerNorm::load(tape, store, &format!("{prefix}.ln1"))?,
            ffn: FeedForward::load(tape, store, &format!("{prefix}.ffn"))?,
            ln2: LayerNorm::load(tape, store, &format!("{prefix}.ln2"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &AttentionMask) -> Result<Var> {
        let a = self.attn.forward(tape, x, x, x, mask)?;
        let r = tape.add(x, a)?;
        let x1 = self.ln1.forward(tape, r)?;
        let f = self.ffn.forward(tape, x1)?;
        let r = tape.add(x1, f)?;
        self.ln2.forward(tape, r)
    }
}

/// Post-norm decoder layer: causal self-attention, cross-attention over
/// the encoder output, FFN; each followed by add & norm.
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub ln1: LayerNorm,
    pub cross_attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, h: usize, ffn_inner: usize, rng: &mut R) -> Result<()> {
        Attention::init(store, &format!("{prefix}.self_attn"), h, rng)?;
        LayerNorm::init(store, &format!("{prefix}.ln1"), h)?;
        Attention::init(store, &format!("{prefix}.cross_attn"), h, rng)?;
        LayerNorm::init(store, &format!("{prefix}.ln2"), h)?;
        FeedForward::init(store, &format!("{prefix}.ffn"), h, ffn_inner, rng)?;
        LayerNorm::init(store, &format!("{prefix}.ln3"), h)
    }

    pub fn load(tape: &mut Tape, store: &ParameterStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::load(tape, store, &format!("{prefix}.self_attn"), heads)?,
            ln1: LayerNorm::load(tape, store, &format!("{prefix}.ln1"))?,
            cross_attn: Attention::load(tape, store, &format!("{prefix}.cross_attn"), heads)?,
            ln2: LayerNorm::load(tape, store, &format!("{prefix}.ln2"))?,
            ffn: FeedForward::load(tape, store, &format!("{prefix}.ffn"))?,
            ln3: LayerNorm::load(tape, store, &format!("{prefix}.ln3"))?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        memory: Var,
        self_mask: &AttentionMask,
        cross_mask: &AttentionMask,
    ) -> Result<Var> {
        let a = self.self_attn.forward(tape, x, x, x, self_mask)?;
        let r = tape.add(x, a)?;
        let x1 = self.ln1.forward(tape, r)?;
        let c = self.cross_attn.forward(tape, x1, memory, memory, cross_mask)?;
        let r = tape.add(x1, c)?;
        let x2 = self.ln2.forward(tape, r)?;
        let f = self.ffn.forward(tape, x2)?;
        let r = tape.add(x2, f)?;
        self.ln3.forward(tape, r)
    }
}
