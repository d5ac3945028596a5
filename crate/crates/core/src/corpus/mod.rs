//! Dialog corpora: JSONL ingestion, vocabulary, per-turn examples, batching.
//!
//! One dialog per line:
//!
//! ```json
//! {"id":"d1","turns":[{"spk":"user","text":["hi"]},{"spk":"sys","text":["hello"],"act":["domain-general"]}]}
//! ```
//!
//! `text` and `belief` may also be given as whitespace-separated strings;
//! they are always written back as token arrays.

pub mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{HtEncoderConfig, MaskPlan};
use crate::error::{Error, Result};
use crate::models::{wrap_sequence, ActVector, ActVocab, ModelContext};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const CLS: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<sos>", "<eos>", "<unk>", "[CLS]"];

pub const DEFAULT_VOCAB_CAP: usize = 1505;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    #[serde(rename = "user")]
    User,
    #[serde(rename = "sys")]
    System,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub spk: Speaker,
    #[serde(deserialize_with = "tokens")]
    pub text: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "opt_tokens")]
    pub belief: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_entities: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requested: Option<Vec<String>>,
}

impl Turn {
    pub fn new(spk: Speaker, text: &str) -> Self {
        Self {
            spk,
            text: text.split_whitespace().map(String::from).collect(),
            belief: None,
            act: None,
            goal_entities: None,
            requested: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TokenField {
    Text(String),
    Tokens(Vec<String>),
}

impl From<TokenField> for Vec<String> {
    fn from(f: TokenField) -> Self {
        match f {
            TokenField::Text(s) => s.split_whitespace().map(String::from).collect(),
            TokenField::Tokens(t) => t,
        }
    }
}

fn tokens<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    TokenField::deserialize(d).map(Into::into)
}

fn opt_tokens<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<String>>, D::Error> {
    Option::<TokenField>::deserialize(d).map(|o| o.map(Into::into))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialog {
    /// Turns alternate speakers starting with the user; no empty utterances.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::InvalidDialog {
                id: self.id.clone(),
                msg,
            })
        };
        if self.turns.is_empty() {
            return bad("no turns".into());
        }
        for (i, t) in self.turns.iter().enumerate() {
            let want = if i % 2 == 0 { Speaker::User } else { Speaker::System };
            if t.spk != want {
                return bad(format!("turn {i} is spoken by {:?}, expected {want:?}", t.spk));
            }
            if t.text.is_empty() {
                return bad(format!("turn {i} is empty"));
            }
        }
        Ok(())
    }

    /// Union of `goal_entities` over all turns; `None` if no turn has them.
    pub fn goal_entities(&self) -> Option<Vec<String>> {
        union_of(self.turns.iter().map(|t| t.goal_entities.as_ref()))
    }

    /// Union of `requested` over all turns; `None` if no turn has them.
    pub fn requested(&self) -> Option<Vec<String>> {
        union_of(self.turns.iter().map(|t| t.requested.as_ref()))
    }
}

fn union_of<'a>(sets: impl Iterator<Item = Option<&'a Vec<String>>>) -> Option<Vec<String>> {
    let mut seen = false;
    let mut out: Vec<String> = Vec::new();
    for s in sets.flatten() {
        seen = true;
        for x in s {
            if !out.contains(x) {
                out.push(x.clone());
            }
        }
    }
    seen.then_some(out)
}

/// Reads and validates a JSONL corpus. Blank lines are skipped.
pub fn load_dialogs(path: &Path) -> Result<Vec<Dialog>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let d: Dialog = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        d.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(d);
    }
    Ok(out)
}

pub fn dialogs_to_jsonl(dialogs: &[Dialog]) -> Result<String> {
    let mut s = String::new();
    for d in dialogs {
        s.push_str(&serde_json::to_string(d)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn save_dialogs(path: &Path, dialogs: &[Dialog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(dialogs_to_jsonl(dialogs)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Token ↔ id bijection with the reserved ids `0..5`.
/// Serializes as the full token list, reserved tokens first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config("vocabulary does not start with the reserved tokens".into()));
        }
        Self::from_tokens(tokens[RESERVED.len()..].to_vec())
    }
}

impl Vocab {
    /// Reserved tokens followed by `content` in order.
    pub fn from_tokens(content: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(content);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Fraction of corpus tokens (utterances and annotations) outside this vocabulary.
    pub fn oov_rate(&self, dialogs: &[Dialog]) -> f64 {
        let (mut total, mut oov) = (0usize, 0usize);
        for t in dialogs.iter().flat_map(|d| d.turns.iter()) {
            for tok in turn_tokens(t) {
                total += 1;
                if !self.contains(tok) {
                    oov += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            oov as f64 / total as f64
        }
    }
}

fn turn_tokens(t: &Turn) -> impl Iterator<Item = &String> {
    t.text
        .iter()
        .chain(t.belief.iter().flatten())
        .chain(t.act.iter().flatten())
}

/// Keeps the `max_size - 5` most frequent tokens of utterances, beliefs
/// and act labels; frequency ties go to the lexicographically smaller token.
pub fn build_vocab(dialogs: &[Dialog], max_size: usize) -> Result<Vocab> {
    if max_size <= RESERVED.len() {
        return Err(Error::Config(format!("vocabulary cap {max_size} must exceed {}", RESERVED.len())));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in dialogs.iter().flat_map(|d| d.turns.iter()) {
        for tok in turn_tokens(t) {
            if !RESERVED.contains(&tok.as_str()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()).collect())
}

/// One prediction problem: the context up to a user turn and the system reply.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub dialog_id: String,
    /// Index of the target system turn within the dialog.
    pub turn: usize,
    pub context: Vec<Vec<String>>,
    pub target: Vec<String>,
    pub belief: Option<Vec<String>>,
    pub act: Option<Vec<String>>,
}

/// One example per system turn `t`, with context `[U_1, S_1, …, U_t]`.
/// `turn_cutoff` limits the number of examples taken from the dialog.
pub fn make_examples(dialog: &Dialog, turn_cutoff: Option<usize>) -> Vec<Example> {
    let mut out = Vec::new();
    for (i, t) in dialog.turns.iter().enumerate() {
        if t.spk != Speaker::System {
            continue;
        }
        if turn_cutoff.is_some_and(|c| out.len() >= c) {
            break;
        }
        out.push(Example {
            dialog_id: dialog.id.clone(),
            turn: i,
            context: dialog.turns[..i].iter().map(|u| u.text.clone()).collect(),
            target: t.text.clone(),
            belief: t.belief.clone(),
            act: t.act.clone(),
        });
    }
    out
}

/// How examples become model inputs.
#[derive(Clone, Debug)]
pub struct EncodeOptions<'a> {
    /// Prepend `CLS` to every utterance.
    pub cls: bool,
    pub max_context_len: usize,
    /// Needed to build act vectors for act-conditioned models.
    pub act_vocab: Option<&'a ActVocab>,
}

/// An example mapped to ids. Sequences are `SOS … EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub dialog_id: String,
    pub turn: usize,
    pub context: ModelContext,
    pub response: Vec<usize>,
    pub belief: Option<Vec<usize>>,
    pub act_seq: Option<Vec<usize>>,
    pub act: Option<ActVector>,
}

/// Maps tokens to ids, adds CLS tokens if asked, and drops the oldest
/// utterances while the context exceeds `max_context_len`.
pub fn encode_example(ex: &Example, vocab: &Vocab, opts: &EncodeOptions) -> Result<EncodedExample> {
    let mut utts: Vec<Vec<usize>> = ex
        .context
        .iter()
        .map(|u| {
            let mut ids = Vec::with_capacity(u.len() + 1);
            if opts.cls {
                ids.push(CLS);
            }
            ids.extend(vocab.encode(u));
            ids
        })
        .collect();
    let total = |u: &[Vec<usize>]| u.iter().map(Vec::len).sum::<usize>();
    if total(&utts) > opts.max_context_len {
        let before = utts.len();
        while utts.len() > 1 && total(&utts) > opts.max_context_len {
            utts.remove(0);
        }
        if total(&utts) > opts.max_context_len {
            utts[0].truncate(opts.max_context_len);
        }
        log::warn!(
            "{} turn {}: context truncated from {before} to {} utterances",
            ex.dialog_id,
            ex.turn,
            utts.len()
        );
    }
    let act = match (opts.act_vocab, &ex.act) {
        (Some(av), Some(labels)) => Some(av.encode(labels)?),
        _ => None,
    };
    Ok(EncodedExample {
        dialog_id: ex.dialog_id.clone(),
        turn: ex.turn,
        context: ModelContext::from_utterances(&utts)?,
        response: wrap_sequence(&vocab.encode(&ex.target)),
        belief: ex.belief.as_ref().map(|b| wrap_sequence(&vocab.encode(b))),
        act_seq: ex.act.as_ref().map(|a| wrap_sequence(&vocab.encode(a))),
        act,
    })
}

/// An example inside a batch: context and target sequences padded to the
/// batch maxima.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub dialog_id: String,
    pub turn: usize,
    pub context: ModelContext,
    pub response: Vec<usize>,
    pub belief: Option<Vec<usize>>,
    pub act_seq: Option<Vec<usize>>,
    pub act: Option<ActVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch {
    pub items: Vec<BatchItem>,
    /// Context length every item is padded to.
    pub padded_len: usize,
}

impl ContextBatch {
    /// Masks and encodings for item `i`, padding excluded from every row.
    pub fn mask_plan(&self, i: usize, cfg: &HtEncoderConfig) -> Result<MaskPlan> {
        MaskPlan::new(&self.items[i].context.layout, cfg, self.padded_len)
    }
}

fn pad_to(seq: &[usize], len: usize) -> Vec<usize> {
    let mut v = seq.to_vec();
    v.resize(len.max(seq.len()), PAD);
    v
}

fn max_len<'a>(seqs: impl Iterator<Item = Option<&'a Vec<usize>>>) -> usize {
    seqs.flatten().map(Vec::len).max().unwrap_or(0)
}

/// Consecutive chunks of `batch_size`, padded per chunk.
pub fn batch_examples(examples: &[EncodedExample], batch_size: usize) -> Result<Vec<ContextBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size is zero".into()));
    }
    Ok(examples
        .chunks(batch_size)
        .map(|chunk| {
            let ctx_len = chunk.iter().map(|e| e.context.tokens.len()).max().unwrap_or(0);
            let resp_len = max_len(chunk.iter().map(|e| Some(&e.response)));
            let belief_len = max_len(chunk.iter().map(|e| e.belief.as_ref()));
            let act_len = max_len(chunk.iter().map(|e| e.act_seq.as_ref()));
            ContextBatch {
                padded_len: ctx_len,
                items: chunk
                    .iter()
                    .map(|e| BatchItem {
                        dialog_id: e.dialog_id.clone(),
                        turn: e.turn,
                        context: e.context.padded(ctx_len),
                        response: pad_to(&e.response, resp_len),
                        belief: e.belief.as_deref().map(|b| pad_to(b, belief_len)),
                        act_seq: e.act_seq.as_deref().map(|a| pad_to(a, act_len)),
                        act: e.act.clone(),
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Roughly 10% of dialogs, chosen by a hash of the id, form the validation split.
pub fn is_validation(dialog_id: &str) -> bool {
    let digest = Sha256::digest(dialog_id.as_bytes());
    let word = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    word % 10 == 0
}

/// `(train, validation)` by [`is_validation`].
pub fn split_dialogs(dialogs: &[Dialog]) -> (Vec<Dialog>, Vec<Dialog>) {
    dialogs.iter().cloned().partition(|d| !is_validation(&d.id))
}

/// Bracketed placeholder such as `[value_food]`; `[CLS]` excluded.
pub fn is_placeholder(token: &str) -> bool {
    token.len() > 2 && token.starts_with('[') && token.ends_with(']') && token != RESERVED[CLS]
}
