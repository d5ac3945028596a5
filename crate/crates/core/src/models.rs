//! Model variants assembled from the HT-Encoder and transformer decoders.
//!
//! Parameter layout:
//!
//! * `embed.tokens`: `[V × E]` token table shared by the encoder and all decoders
//! * `enc.*`: the encoder (see [`crate::encoder`])
//! * `dec.*`: the response decoder, or `dec.belief.*`, `dec.act.*`,
//!   `dec.resp.*` for the joint model
//! * `act.embed.*`: dialog-act embedding (act-conditioned variants)
//! * `link.*`: `[E × E]` mean-embedding links (joint model)

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{ContextBatch, BatchItem, EOS, PAD, SOS};
use crate::encoder::{encode_padded, EncodedContext, HtEncoderConfig};
use crate::error::{Error, Result};
use crate::masking::{build_layout, global_pe, AttentionMask, CtScheme, UtteranceLayout};
use crate::nn::{init_bound, DecoderLayer, Linear};
use crate::params::{adam_step, AdamConfig, ParameterStore};
use crate::tensor::Tensor;

pub const TOKEN_TABLE: &str = "embed.tokens";
pub const ACT_EMBED: &str = "act.embed";
pub const LINK_BELIEF_TO_ACT: &str = "link.belief_to_act";
pub const LINK_BELIEF_TO_RESP: &str = "link.belief_to_resp";
pub const LINK_ACT_TO_RESP: &str = "link.act_to_resp";

/// Default act inventory, one label per line.
pub const DEFAULT_ACT_LABELS: &str = include_str!("../data/act_labels.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "SET")]
    Set,
    #[serde(rename = "MAT")]
    Mat,
    #[serde(rename = "HIER")]
    Hier,
    #[serde(rename = "SET_PP")]
    SetPP,
    #[serde(rename = "HIER_PP")]
    HierPP,
    #[serde(rename = "HIER_CLS")]
    HierCls,
    #[serde(rename = "HIER_JOINT")]
    HierJoint,
}

/// Layer counts and widths of a preset: `(M, N, D, H, A, E)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preset {
    pub m_shared: usize,
    pub n_context: usize,
    pub decoder_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub embed: usize,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 7] = [
        ModelVariant::Set,
        ModelVariant::Mat,
        ModelVariant::Hier,
        ModelVariant::SetPP,
        ModelVariant::HierPP,
        ModelVariant::HierCls,
        ModelVariant::HierJoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Set => "SET",
            ModelVariant::Mat => "MAT",
            ModelVariant::Hier => "HIER",
            ModelVariant::SetPP => "SET_PP",
            ModelVariant::HierPP => "HIER_PP",
            ModelVariant::HierCls => "HIER_CLS",
            ModelVariant::HierJoint => "HIER_JOINT",
        }
    }

    /// Decoder input embeddings receive an embedded act vector.
    pub fn act_conditioning(self) -> bool {
        matches!(self, ModelVariant::SetPP | ModelVariant::HierPP | ModelVariant::HierCls)
    }

    /// Three decoders: belief, act, response.
    pub fn joint(self) -> bool {
        self == ModelVariant::HierJoint
    }

    pub fn ct_scheme(self) -> CtScheme {
        match self {
            ModelVariant::HierCls => CtScheme::HierCls,
            _ => CtScheme::Hier,
        }
    }

    /// Utterances carry a leading CLS token.
    pub fn uses_cls(self) -> bool {
        self == ModelVariant::HierCls
    }

    pub fn preset(self) -> Preset {
        let p = |m, n, d, h, a, e| Preset {
            m_shared: m,
            n_context: n,
            decoder_layers: d,
            hidden: h,
            heads: a,
            embed: e,
        };
        match self {
            ModelVariant::Set => p(6, 0, 3, 100, 4, 100),
            ModelVariant::Mat => p(0, 4, 6, 200, 5, 100),
            ModelVariant::Hier | ModelVariant::HierJoint => p(3, 3, 3, 100, 4, 100),
            ModelVariant::SetPP => p(4, 0, 3, 91, 7, 175),
            ModelVariant::HierPP | ModelVariant::HierCls => p(4, 6, 3, 91, 7, 175),
        }
    }

    /// Checks the variant's structural invariants against an encoder config.
    pub fn check(self, enc: &HtEncoderConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.name())));
        match self {
            ModelVariant::Set | ModelVariant::SetPP if enc.n_context != 0 => {
                bad(format!("needs n_context = 0, got {}", enc.n_context))
            }
            ModelVariant::Mat if enc.m_shared != 0 => bad(format!("needs m_shared = 0, got {}", enc.m_shared)),
            ModelVariant::Mat if enc.ct_scheme != CtScheme::Hier => bad("needs the HIER context mask".into()),
            ModelVariant::HierCls if enc.ct_scheme != CtScheme::HierCls => bad("needs the HIER_CLS context mask".into()),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    /// Accepts `SET++`/`SET_PP`, `HIER-CLS`/`HIER_CLS` and so on, in any case.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace("++", "_PP").replace('-', "_");
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub encoder: HtEncoderConfig,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    pub act_dim: usize,
    /// Longest context (in tokens) the model accepts.
    pub max_context_len: usize,
}

impl ModelConfig {
    /// Table preset for `variant`, with `ffn_inner = H` and dropout 0.1.
    pub fn preset(variant: ModelVariant, vocab_size: usize) -> Self {
        let p = variant.preset();
        Self {
            variant,
            encoder: HtEncoderConfig {
                m_shared: p.m_shared,
                n_context: p.n_context,
                hidden: p.hidden,
                heads: p.heads,
                embed: p.embed,
                ffn_inner: p.hidden,
                dropout: 0.1,
                ct_scheme: variant.ct_scheme(),
                pe_reinjection: true,
            },
            decoder_layers: p.decoder_layers,
            vocab_size,
            act_dim: 44,
            max_context_len: 512,
        }
    }

    /// A small configuration with the variant's layer structure, for tests
    /// and desk-scale runs.
    pub fn tiny(variant: ModelVariant, vocab_size: usize, hidden: usize) -> Self {
        let p = variant.preset();
        let mut cfg = Self::preset(variant, vocab_size);
        cfg.encoder.m_shared = p.m_shared.min(1);
        cfg.encoder.n_context = p.n_context.min(1);
        cfg.encoder.hidden = hidden;
        cfg.encoder.embed = hidden;
        cfg.encoder.heads = 2;
        cfg.encoder.ffn_inner = 2 * hidden;
        cfg.encoder.dropout = 0.0;
        cfg.decoder_layers = 1;
        cfg
    }

    pub fn hidden(&self) -> usize {
        self.encoder.hidden
    }

    pub fn embed(&self) -> usize {
        self.encoder.embed
    }

    pub fn validate(&self, strict: bool) -> Result<()> {
        self.variant.check(&self.encoder)?;
        self.encoder.validate(strict)?;
        if self.decoder_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if strict {
            crate::encoder::check_usize("nlayers_d", self.decoder_layers, crate::encoder::bounds::LAYERS)?;
        }
        if self.vocab_size <= CLS_ID {
            return Err(Error::Config(format!("vocabulary of {} cannot hold the reserved ids", self.vocab_size)));
        }
        if self.variant.act_conditioning() && self.act_dim == 0 {
            return Err(Error::Config("act-conditioned variant with act_dim 0".into()));
        }
        if self.max_context_len == 0 {
            return Err(Error::Config("max_context_len is zero".into()));
        }
        Ok(())
    }

    /// Decoder name prefixes, in decoding order.
    pub fn decoders(&self) -> &'static [&'static str] {
        if self.variant.joint() {
            &["dec.belief", "dec.act", "dec.resp"]
        } else {
            &["dec"]
        }
    }

    /// The decoder that produces responses.
    pub fn response_decoder(&self) -> &'static str {
        if self.variant.joint() {
            "dec.resp"
        } else {
            "dec"
        }
    }
}

const CLS_ID: usize = crate::corpus::CLS;

/// Ordered act labels; an [`ActVector`] is multi-hot over them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActVocab {
    labels: Vec<String>,
}

impl ActVocab {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if !seen.insert(l) {
                return Err(Error::Config(format!("duplicate act label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// Parses one label per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The shipped 44-label inventory.
    pub fn default_labels() -> Self {
        Self::parse(DEFAULT_ACT_LABELS).expect("bundled act labels are valid")
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn encode(&self, labels: &[String]) -> Result<ActVector> {
        let mut v = vec![0.0; self.dim()];
        for l in labels {
            let i = self
                .index(l)
                .ok_or_else(|| Error::Config(format!("act label {l:?} not in act vocabulary")))?;
            v[i] = 1.0;
        }
        Ok(ActVector(v))
    }
}

/// Multi-hot dialog act vector; entries are 0 or 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActVector(Vec<f64>);

impl ActVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_indices(dim: usize, active: &[usize]) -> Result<Self> {
        let mut v = vec![0.0; dim];
        for &i in active {
            *v.get_mut(i)
                .ok_or_else(|| Error::Config(format!("act index {i} outside dimension {dim}")))? = 1.0;
        }
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Encoder input for one example: token ids (possibly padded at the end)
/// and the layout of the real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelContext {
    pub tokens: Vec<usize>,
    pub layout: UtteranceLayout,
}

impl ModelContext {
    pub fn from_utterances(utterances: &[Vec<usize>]) -> Result<Self> {
        let lengths: Vec<usize> = utterances.iter().map(Vec::len).collect();
        Ok(Self {
            tokens: utterances.concat(),
            layout: build_layout(&lengths)?,
        })
    }

    /// Same context with `PAD` appended up to `len` tokens.
    pub fn padded(&self, len: usize) -> Self {
        let mut tokens = self.tokens.clone();
        if tokens.len() < len {
            tokens.resize(len, PAD);
        }
        Self {
            tokens,
            layout: self.layout.clone(),
        }
    }
}

/// Logits of the three joint decoders, each `[len × V]`.
#[derive(Clone, Copy, Debug)]
pub struct JointOutput {
    pub belief_logits: Var,
    pub act_logits: Var,
    pub response_logits: Var,
}

/// Per-token losses of one step. `belief`/`act` are set for the joint model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub response: f64,
    pub belief: Option<f64>,
    pub act: Option<f64>,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

/// Validates `config` and initializes every parameter from `seed`.
pub fn build_model(config: ModelConfig, seed: u64, strict: bool) -> Result<Model> {
    config.validate(strict)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let (e, h) = (config.embed(), config.hidden());
    let bound = init_bound(h);
    store.init_uniform(TOKEN_TABLE, config.vocab_size, e, bound, &mut rng)?;
    config.encoder.init_params(&mut store, &mut rng)?;
    for dec in config.decoders() {
        if e != h {
            Linear::init(&mut store, &format!("{dec}.in_proj"), e, h, bound, &mut rng)?;
        }
        for i in 0..config.decoder_layers {
            DecoderLayer::init(&mut store, &format!("{dec}.layer{i}"), h, config.encoder.ffn_inner, &mut rng)?;
        }
        Linear::init(&mut store, &format!("{dec}.out"), h, config.vocab_size, bound, &mut rng)?;
    }
    if config.variant.act_conditioning() {
        Linear::init(&mut store, ACT_EMBED, config.act_dim, e, bound, &mut rng)?;
    }
    if config.variant.joint() {
        for link in [LINK_BELIEF_TO_ACT, LINK_BELIEF_TO_RESP, LINK_ACT_TO_RESP] {
            store.init_uniform(link, e, e, bound, &mut rng)?;
        }
    }
    Ok(Model { config, params: store })
}

impl Model {
    /// Runs the HT-Encoder over `ctx`, whose tokens may be padded.
    pub fn encode(&self, tape: &mut Tape, ctx: &ModelContext, capture: bool) -> Result<EncodedContext> {
        let len = ctx.layout.len();
        if len > self.config.max_context_len {
            return Err(Error::ContextTooLong {
                len,
                max: self.config.max_context_len,
            });
        }
        if ctx.tokens.len() < len {
            return Err(Error::shape("encode", format!("{} tokens for a {len}-token layout", ctx.tokens.len())));
        }
        let table = tape.param(&self.params, TOKEN_TABLE)?;
        let emb = tape.gather_rows(table, &ctx.tokens)?;
        encode_padded(tape, &self.params, &self.config.encoder, emb, &ctx.layout, capture)
    }

    /// Affine map of a multi-hot act vector to a `[1 × E]` embedding.
    pub fn embed_act(&self, tape: &mut Tape, act: &ActVector) -> Result<Var> {
        if !self.config.variant.act_conditioning() {
            return Err(Error::Config(format!("{} takes no act vector", self.config.variant)));
        }
        if act.dim() != self.config.act_dim {
            return Err(Error::shape(
                "embed_act",
                format!("act vector of dimension {}, expected {}", act.dim(), self.config.act_dim),
            ));
        }
        let x = tape.constant(Tensor::matrix(1, act.dim(), act.values().to_vec())?)?;
        Linear::load(tape, &self.params, ACT_EMBED)?.forward(tape, x)
    }

    /// Mean of the token-table rows for `ids`, as `[1 × E]`.
    pub fn mean_token_embedding(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyMean);
        }
        let table = tape.param(&self.params, TOKEN_TABLE)?;
        let rows = tape.gather_rows(table, ids)?;
        tape.mean_rows(rows)
    }

    /// One decoder stack. `extra` (`[1 × E]`) is added to every input
    /// embedding before positional encoding.
    pub fn decode(
        &self,
        tape: &mut Tape,
        decoder: &str,
        memory: &EncodedContext,
        prefix: &[usize],
        extra: Option<Var>,
    ) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::Config(format!("empty prefix for decoder {decoder}")));
        }
        let cfg = &self.config;
        let (e, h) = (cfg.embed(), cfg.hidden());
        let len = prefix.len();
        let table = tape.param(&self.params, TOKEN_TABLE)?;
        let mut x = tape.gather_rows(table, prefix)?;
        if let Some(extra) = extra {
            x = tape.add_row(x, extra)?;
        }
        let pe = tape.constant(global_pe(len, e)?)?;
        x = tape.add(x, pe)?;
        if e != h {
            x = Linear::load(tape, &self.params, &format!("{decoder}.in_proj"))?.forward(tape, x)?;
        }
        let self_mask = AttentionMask::causal(len);
        let valid = memory.layout.len();
        let cross_mask = AttentionMask::from_fn(len, memory.padded_len, |_, j| j < valid);
        for i in 0..cfg.decoder_layers {
            let layer = DecoderLayer::load(tape, &self.params, &format!("{decoder}.layer{i}"), cfg.encoder.heads)?;
            x = layer.forward(tape, x, memory.hidden, &self_mask, &cross_mask)?;
        }
        Linear::load(tape, &self.params, &format!("{decoder}.out"))?.forward(tape, x)
    }

    /// Next-token logits `[len × V]` of the response decoder for every
    /// position of `prefix`, which must start with `SOS`.
    pub fn forward_response(
        &self,
        tape: &mut Tape,
        ctx: &ModelContext,
        prefix: &[usize],
        act: Option<&ActVector>,
    ) -> Result<Var> {
        check_prefix(prefix, "response")?;
        if self.config.variant.joint() {
            return Err(Error::Config("the joint model decodes with forward_joint".into()));
        }
        let memory = self.encode(tape, ctx, false)?;
        let extra = match act {
            Some(a) => Some(self.embed_act(tape, a)?),
            None => None,
        };
        self.decode(tape, "dec", &memory, prefix, extra)
    }

    /// All three joint decoders over one encoder pass. The act decoder's
    /// inputs receive `link.belief_to_act · mean(belief_prefix)`; the
    /// response decoder's receive the belief and act means through their
    /// own links. `PAD` and `EOS` entries are ignored by the means.
    pub fn forward_joint(
        &self,
        tape: &mut Tape,
        ctx: &ModelContext,
        belief_prefix: &[usize],
        act_prefix: &[usize],
        response_prefix: &[usize],
    ) -> Result<JointOutput> {
        if !self.config.variant.joint() {
            return Err(Error::Config(format!("{} has a single decoder", self.config.variant)));
        }
        check_prefix(belief_prefix, "belief")?;
        check_prefix(act_prefix, "act")?;
        check_prefix(response_prefix, "response")?;
        let memory = self.encode(tape, ctx, false)?;
        let (to_act, to_resp) = self.joint_links(tape, belief_prefix, act_prefix)?;
        Ok(JointOutput {
            belief_logits: self.decode(tape, "dec.belief", &memory, belief_prefix, None)?,
            act_logits: self.decode(tape, "dec.act", &memory, act_prefix, Some(to_act))?,
            response_logits: self.decode(tape, "dec.resp", &memory, response_prefix, Some(to_resp))?,
        })
    }

    /// Conditioning rows for the act and response decoders of the joint model.
    pub fn joint_links(&self, tape: &mut Tape, belief: &[usize], act: &[usize]) -> Result<(Var, Var)> {
        let b = self.mean_token_embedding(tape, &link_tokens(belief))?;
        let a = self.mean_token_embedding(tape, &link_tokens(act))?;
        let w_ba = tape.param(&self.params, LINK_BELIEF_TO_ACT)?;
        let w_br = tape.param(&self.params, LINK_BELIEF_TO_RESP)?;
        let w_ar = tape.param(&self.params, LINK_ACT_TO_RESP)?;
        let to_act = tape.matmul(b, w_ba)?;
        let br = tape.matmul(b, w_br)?;
        let ar = tape.matmul(a, w_ar)?;
        let to_resp = tape.add(br, ar)?;
        Ok((to_act, to_resp))
    }

    /// Teacher-forced loss of a batch: token-weighted mean cross-entropy
    /// of the response, plus (joint model) those of belief and act, summed
    /// without weights.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &ContextBatch) -> Result<(Var, StepLoss)> {
        if batch.items.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let joint = self.config.variant.joint();
        let mut resp = Pooled::default();
        let mut belief = Pooled::default();
        let mut act = Pooled::default();
        for item in &batch.items {
            let (inp, tgt) = teacher_forcing(&item.response);
            if joint {
                let b_seq = annotation(&item.belief, "belief", item)?;
                let a_seq = annotation(&item.act_seq, "act sequence", item)?;
                let (b_in, b_tgt) = teacher_forcing(b_seq);
                let (a_in, a_tgt) = teacher_forcing(a_seq);
                let out = self.forward_joint(tape, &item.context, b_in, a_in, inp)?;
                belief.push(tape, out.belief_logits, b_tgt)?;
                act.push(tape, out.act_logits, a_tgt)?;
                resp.push(tape, out.response_logits, tgt)?;
            } else {
                let act_vec = if self.config.variant.act_conditioning() {
                    Some(item.act.as_ref().ok_or_else(|| {
                        Error::Annotation(format!("{} turn {} has no act vector", item.dialog_id, item.turn))
                    })?)
                } else {
                    None
                };
                let logits = self.forward_response(tape, &item.context, inp, act_vec)?;
                resp.push(tape, logits, tgt)?;
            }
        }
        let (mut total, r) = resp.finish(tape)?;
        let mut loss = StepLoss {
            total: r,
            response: r,
            belief: None,
            act: None,
            tokens: resp.count,
        };
        if joint {
            let (bv, b) = belief.finish(tape)?;
            let (av, a) = act.finish(tape)?;
            total = tape.add(total, bv)?;
            total = tape.add(total, av)?;
            loss.belief = Some(b);
            loss.act = Some(a);
            loss.tokens += belief.count + act.count;
        }
        loss.total = tape.value(total).item();
        Ok((total, loss))
    }

    /// Loss, backward pass and one Adam update. `seed` drives dropout.
    pub fn training_step(&mut self, batch: &ContextBatch, adam: &AdamConfig, seed: u64) -> Result<StepLoss> {
        let rate = self.config.encoder.dropout;
        let mut tape = if rate > 0.0 {
            Tape::with_dropout(rate, seed)
        } else {
            Tape::new()
        };
        let (loss_var, loss) = self.batch_loss(&mut tape, batch)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        self.params.zero_grad();
        tape.backward(loss_var, &mut self.params)?;
        adam_step(&mut self.params, adam)?;
        Ok(loss)
    }

    /// Loss without dropout or parameter updates.
    pub fn evaluate_loss(&self, batch: &ContextBatch) -> Result<StepLoss> {
        let mut tape = Tape::new();
        Ok(self.batch_loss(&mut tape, batch)?.1)
    }
}

fn check_prefix(prefix: &[usize], what: &str) -> Result<()> {
    match prefix.first() {
        None => Err(Error::Config(format!("empty {what} prefix"))),
        Some(&SOS) => Ok(()),
        Some(t) => Err(Error::Config(format!("{what} prefix starts with {t}, not SOS"))),
    }
}

/// Tokens that enter a mean-embedding link: `PAD` and `EOS` are dropped,
/// so a padded teacher-forced input and a decoded prefix agree.
fn link_tokens(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&t| t != PAD && t != EOS).collect()
}

/// Splits `SOS … EOS [PAD…]` into decoder input and next-token targets.
fn teacher_forcing(seq: &[usize]) -> (&[usize], &[usize]) {
    (&seq[..seq.len() - 1], &seq[1..])
}

fn annotation<'a>(seq: &'a Option<Vec<usize>>, what: &str, item: &BatchItem) -> Result<&'a [usize]> {
    seq.as_deref()
        .filter(|s| s.len() >= 2)
        .ok_or_else(|| Error::Annotation(format!("{} turn {} has no {what}", item.dialog_id, item.turn)))
}

/// Cross-entropy terms pooled so that every non-pad token weighs the same.
#[derive(Default)]
struct Pooled {
    terms: Vec<(Var, usize)>,
    count: usize,
}

impl Pooled {
    fn push(&mut self, tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<()> {
        let n = targets.iter().filter(|&&t| t != PAD).count();
        if n == 0 {
            return Ok(());
        }
        let ce = tape.cross_entropy(logits, targets, PAD)?;
        self.terms.push((ce, n));
        self.count += n;
        Ok(())
    }

    fn finish(&self, tape: &mut Tape) -> Result<(Var, f64)> {
        let mut acc: Option<Var> = None;
        for &(ce, n) in &self.terms {
            let w = tape.scale(ce, n as f64 / self.count as f64)?;
            acc = Some(match acc {
                None => w,
                Some(a) => tape.add(a, w)?,
            });
        }
        let v = acc.ok_or(Error::EmptyLoss)?;
        Ok((v, tape.value(v).item()))
    }
}

/// Sequences must end in EOS for decoding to have a stopping target.
pub fn wrap_sequence(ids: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(SOS);
    out.extend_from_slice(ids);
    out.push(EOS);
    out
}
