//! Greedy and beam-search decoding.
//!
//! Search is written against [`StepModel`], a next-token log-probability
//! oracle, so it can be tested on hand-built distributions and run on any
//! decoder of a [`Model`].

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::corpus::{EOS, SOS};
use crate::encoder::EncodedContext;
use crate::error::{Error, Result};
use crate::masking::UtteranceLayout;
use crate::models::{ActVector, Model, ModelContext};
use crate::tensor::Tensor;

/// Next-token log-probabilities given a prefix that starts with `SOS`.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, without `SOS` and without the final `EOS`.
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of every emitted token, `EOS` included.
    pub log_prob: f64,
    pub finished: bool,
    /// Whether generation stopped on `EOS` (as opposed to the length limit).
    pub eos: bool,
}

impl Hypothesis {
    /// Emitted length, counting `EOS`.
    pub fn emitted(&self) -> usize {
        self.tokens.len() + usize::from(self.eos)
    }

    /// `log_prob / len^alpha`, with the length floored at 1.
    pub fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.log_prob
        } else {
            self.log_prob / (self.emitted().max(1) as f64).powf(alpha)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    /// Maximum emitted tokens per hypothesis, `EOS` included.
    pub max_len: usize,
    pub length_alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 5,
            max_len: 40,
            length_alpha: 0.0,
        }
    }
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Highest-probability token at every step; ties go to the lowest id.
pub fn greedy_decode<M: StepModel + ?Sized>(model: &M, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut prefix = vec![SOS];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = model.log_probs(&prefix)?;
        let t = argmax_lowest(&lp);
        log_prob += lp[t];
        if t == EOS {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                log_prob,
                finished: true,
                eos: true,
            });
        }
        prefix.push(t);
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        log_prob,
        finished: true,
        eos: false,
    })
}

/// Descending score, then lexicographic token order.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Beam search keeping `width` live hypotheses per step. Hypotheses that
/// emit `EOS` retire to a pool; live ones are retired when `max_len` is
/// reached. The pool is ranked by [`Hypothesis::score`] and the best
/// `width` are returned.
///
/// With `length_alpha == 0` the search stops as soon as the best retired
/// hypothesis outscores every live one, since extending a hypothesis can
/// only lower its log-probability.
pub fn beam_search<M: StepModel + ?Sized>(model: &M, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if cfg.width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if cfg.max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![SOS], 0.0)];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        let mut cands: Vec<(f64, Vec<usize>)> = Vec::with_capacity(live.len() * model.vocab_size());
        for (prefix, lp) in &live {
            let next = model.log_probs(prefix)?;
            for (t, l) in next.iter().enumerate() {
                let mut seq = prefix.clone();
                seq.push(t);
                cands.push((lp + l, seq));
            }
        }
        cands.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        let mut next_live = Vec::with_capacity(cfg.width);
        for (lp, seq) in cands {
            if next_live.len() == cfg.width {
                break;
            }
            if *seq.last().expect("non-empty") == EOS {
                pool.push(Hypothesis {
                    tokens: seq[1..seq.len() - 1].to_vec(),
                    log_prob: lp,
                    finished: true,
                    eos: true,
                });
            } else {
                next_live.push((seq, lp));
            }
        }
        live = next_live;
        if step + 1 == cfg.max_len {
            for (seq, lp) in live.drain(..) {
                pool.push(Hypothesis {
                    tokens: seq[1..].to_vec(),
                    log_prob: lp,
                    finished: true,
                    eos: false,
                });
            }
        }
        if live.is_empty() {
            break;
        }
        if cfg.length_alpha == 0.0 {
            let best_done = pool.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|(_, lp)| *lp).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }
    pool.sort_by(|a, b| rank((a.score(cfg.length_alpha), &a.tokens), (b.score(cfg.length_alpha), &b.tokens)));
    pool.truncate(cfg.width);
    Ok(pool)
}

/// One decoder of a model over a fixed encoded context.
pub struct DecoderScorer<'a> {
    model: &'a Model,
    decoder: &'static str,
    memory: Tensor,
    layout: UtteranceLayout,
    /// `[1 × E]` row added to every decoder input.
    extra: Option<Tensor>,
}

impl<'a> DecoderScorer<'a> {
    /// Response decoder of a single-decoder model, optionally act-conditioned.
    pub fn response(model: &'a Model, ctx: &ModelContext, act: Option<&ActVector>) -> Result<Self> {
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, ctx, false)?;
        let extra = match act {
            Some(a) => {
                let v = model.embed_act(&mut tape, a)?;
                Some(tape.value(v).clone())
            }
            None => None,
        };
        Ok(Self {
            model,
            decoder: model.config.response_decoder(),
            memory: tape.value(enc.hidden).clone(),
            layout: enc.layout,
            extra,
        })
    }

    fn with(&self, decoder: &'static str, extra: Option<Tensor>) -> Self {
        Self {
            model: self.model,
            decoder,
            memory: self.memory.clone(),
            layout: self.layout.clone(),
            extra,
        }
    }

    /// Full-sequence next-token logits for `prefix`.
    pub fn logits(&self, prefix: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let hidden = tape.constant(self.memory.clone())?;
        let memory = EncodedContext {
            hidden,
            layout: self.layout.clone(),
            padded_len: self.memory.rows(),
            layers: Vec::new(),
        };
        let extra = match &self.extra {
            Some(e) => Some(tape.constant(e.clone())?),
            None => None,
        };
        let out = self.model.decode(&mut tape, self.decoder, &memory, prefix, extra)?;
        Ok(tape.value(out).clone())
    }
}

impl StepModel for DecoderScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = self.logits(prefix)?;
        Ok(log_softmax(logits.row(logits.rows() - 1)))
    }
}

/// Decoded output for one context. `belief` and `act` are set for the
/// joint model, whose decoders run in order belief → act → response.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub hypotheses: Vec<Hypothesis>,
    pub belief: Option<Vec<usize>>,
    pub act: Option<Vec<usize>>,
}

/// Beam-decodes a response; `width == 1` gives the greedy result.
pub fn generate(model: &Model, ctx: &ModelContext, act: Option<&ActVector>, cfg: &BeamConfig) -> Result<Generation> {
    let act = if model.config.variant.act_conditioning() { act } else { None };
    let base = DecoderScorer::response(model, ctx, act)?;
    if !model.config.variant.joint() {
        return Ok(Generation {
            hypotheses: beam_search(&base, cfg)?,
            belief: None,
            act: None,
        });
    }
    let best = |s: &DecoderScorer| -> Result<Vec<usize>> {
        let hyps = beam_search(s, cfg)?;
        let mut seq = vec![SOS];
        seq.extend(&hyps[0].tokens);
        Ok(seq)
    };
    let belief = best(&base.with("dec.belief", None))?;
    // The act sequence is not known yet; only the belief link matters here.
    let mut tape = Tape::new();
    let (to_act, _) = model.joint_links(&mut tape, &belief, &[SOS])?;
    let act_seq = best(&base.with("dec.act", Some(tape.value(to_act).clone())))?;
    let mut tape = Tape::new();
    let (_, to_resp) = model.joint_links(&mut tape, &belief, &act_seq)?;
    let resp = base.with("dec.resp", Some(tape.value(to_resp).clone()));
    Ok(Generation {
        hypotheses: beam_search(&resp, cfg)?,
        belief: Some(belief[1..].to_vec()),
        act: Some(act_seq[1..].to_vec()),
    })
}

/// Log-probability of `hyp` re-scored through [`Model::forward_response`].
pub fn rescore(model: &Model, ctx: &ModelContext, act: Option<&ActVector>, hyp: &Hypothesis) -> Result<f64> {
    let mut seq = vec![SOS];
    seq.extend(&hyp.tokens);
    let mut targets = hyp.tokens.clone();
    if hyp.eos {
        targets.push(EOS);
    } else {
        seq.pop();
    }
    let mut tape = Tape::new();
    let logits = model.forward_response(&mut tape, ctx, &seq, act)?;
    let l = tape.value(logits);
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, &t)| log_softmax(l.row(i))[t])
        .sum())
}
