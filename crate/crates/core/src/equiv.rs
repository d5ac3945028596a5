//! Self-checks: hierarchical equivalence of the utterance phase and
//! finite-difference gradients of every model variant.
//!
//! The equivalence oracle encodes each utterance on its own with a plain
//! unmasked encoder stack (absolute positions `0..l`) and compares the
//! result with the rows of the masked joint run. It shares only the layer
//! implementation with the code under test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::corpus::{batch_examples, ContextBatch, EncodedExample, CLS};
use crate::encoder::{encode_with_plan, encoder_layer, shared_prefix, HtEncoderConfig, MaskPlan};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_check, GradCheckReport};
use crate::masking::{build_layout, global_pe, AttentionMask, CtScheme};
use crate::models::{build_model, wrap_sequence, ActVector, ModelConfig, ModelContext, ModelVariant};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// A random tiny encoder and context layout.
#[derive(Clone, Debug, Serialize)]
pub struct EquivCase {
    pub config: HtEncoderConfig,
    pub lengths: Vec<usize>,
    pub seed: u64,
}

/// `T ≤ 5` utterances of `1..=8` tokens, `H ∈ {8, 16}`, `M ∈ {1, 2}`,
/// `N ∈ {0, 1, 2}`, two heads, no dropout.
pub fn random_case(rng: &mut impl Rng) -> EquivCase {
    let hidden = if rng.gen_bool(0.5) { 8 } else { 16 };
    let t = rng.gen_range(1..=5);
    let schemes = [CtScheme::Hier, CtScheme::HierCls, CtScheme::Full];
    EquivCase {
        config: HtEncoderConfig {
            m_shared: rng.gen_range(1..=2),
            n_context: rng.gen_range(0..=2),
            hidden,
            heads: 2,
            embed: hidden,
            ffn_inner: 2 * hidden,
            dropout: 0.0,
            ct_scheme: schemes[rng.gen_range(0..schemes.len())],
            pe_reinjection: true,
        },
        lengths: (0..t).map(|_| rng.gen_range(1..=8)).collect(),
        seed: rng.gen(),
    }
}

/// Deliberate fault for negative-control runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Lets the first token of the context see the last token of the
    /// context in the utterance phase.
    LeakUtteranceMask,
}

/// Max `|Δ|` between the utterance-phase output and per-utterance encodings.
pub fn hierarchical_deviation(case: &EquivCase, fault: Fault) -> Result<f64> {
    let cfg = &case.config;
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let mut store = ParameterStore::new();
    cfg.init_params(&mut store, &mut rng)?;
    let layout = build_layout(&case.lengths)?;
    let len = layout.len();
    let input = Tensor::matrix(len, cfg.embed, (0..len * cfg.embed).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let mut plan = MaskPlan::new(&layout, cfg, len)?;
    if fault == Fault::LeakUtteranceMask {
        plan.ut_mask.set(0, len - 1, true);
    }
    let mut tape = Tape::new();
    let x = tape.constant(input.clone())?;
    let enc = encode_with_plan(&mut tape, &store, cfg, x, &layout, &plan, true)?;
    let joint = enc.phase1(cfg.m_shared).expect("M > 0").clone();

    let mut worst: f64 = 0.0;
    for u in 0..layout.num_utterances() {
        let span = layout.span(u);
        let l = span.len();
        let mut tape = Tape::new();
        let rows = tape.constant(input.slice_rows(span.start, span.end))?;
        let pe = tape.constant(global_pe(l, cfg.embed)?)?;
        let mut h: Var = tape.add(rows, pe)?;
        let full = AttentionMask::ones(l, l);
        for i in 0..cfg.m_shared {
            h = encoder_layer(&mut tape, &store, &shared_prefix(i), cfg.heads, h, &full)?;
        }
        let alone = tape.value(h);
        for r in 0..l {
            for (a, b) in alone.row(r).iter().zip(joint.row(span.start + r)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivSummary {
    pub cases: usize,
    pub max_deviation: f64,
    pub worst_case: Option<usize>,
}

/// Runs `cases` random cases from `seed`.
pub fn run_equivalence(seed: u64, cases: usize, fault: Fault) -> Result<EquivSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = EquivSummary {
        cases,
        max_deviation: 0.0,
        worst_case: None,
    };
    for i in 0..cases {
        let mut case = random_case(&mut rng);
        if fault != Fault::None && case.lengths.len() < 2 {
            case.lengths.push(1);
        }
        let d = hierarchical_deviation(&case, fault)?;
        if summary.worst_case.is_none() || d > summary.max_deviation {
            summary.max_deviation = d;
            summary.worst_case = Some(i);
        }
    }
    Ok(summary)
}

/// Tiny configuration of `variant` used by the gradient checks.
pub fn tiny_config(variant: ModelVariant, vocab_size: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(variant, vocab_size, 8);
    cfg.act_dim = 6;
    cfg
}

/// Two hand-built examples with every annotation the variant may need.
pub fn toy_batch(variant: ModelVariant, vocab_size: usize, act_dim: usize) -> Result<ContextBatch> {
    let tok = |i: usize| 5 + i % (vocab_size - 5);
    let utt = |start: usize, n: usize| -> Vec<usize> {
        let mut u = Vec::with_capacity(n + 1);
        if variant.uses_cls() {
            u.push(CLS);
        }
        u.extend((0..n).map(|k| tok(start + 3 * k)));
        u
    };
    let mk = |id: &str, utts: Vec<Vec<usize>>, resp: Vec<usize>, acts: &[usize]| -> Result<EncodedExample> {
        Ok(EncodedExample {
            dialog_id: id.into(),
            turn: utts.len(),
            context: ModelContext::from_utterances(&utts)?,
            belief: Some(wrap_sequence(&[tok(2), tok(9)])),
            act_seq: Some(wrap_sequence(&[tok(4)])),
            act: Some(ActVector::from_indices(act_dim, acts)?),
            response: wrap_sequence(&resp),
        })
    };
    let examples = vec![
        mk("a", vec![utt(0, 3), utt(1, 2), utt(2, 4)], vec![tok(7), tok(8), tok(1)], &[0, 2])?,
        mk("b", vec![utt(5, 2)], vec![tok(3), tok(3)], &[1])?,
    ];
    Ok(batch_examples(&examples, 2)?.remove(0))
}

/// Finite-difference check of the full teacher-forced loss of a tiny
/// `variant` model on [`toy_batch`].
pub fn variant_gradcheck(variant: ModelVariant, seed: u64, samples: usize, epsilon: f64) -> Result<GradCheckReport> {
    let vocab = 20;
    let cfg = tiny_config(variant, vocab);
    let model = build_model(cfg.clone(), seed, false)?;
    let batch = toy_batch(variant, vocab, cfg.act_dim)?;
    let loss = |tape: &mut Tape, store: &ParameterStore| -> Result<Var> {
        let m = crate::models::Model {
            config: cfg.clone(),
            params: store.clone(),
        };
        Ok(m.batch_loss(tape, &batch)?.0)
    };
    if model.config.encoder.dropout > 0.0 {
        return Err(Error::Config("gradient checks need dropout 0".into()));
    }
    finite_difference_check(loss, &model.params, epsilon, samples, seed)
}
