//! Command-line interface. [`run`] parses arguments and dispatches to one
//! function per subcommand; each returns a crate error whose
//! [`Error::exit_code`] is the process status.

pub mod config;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::synth::{generate_synthetic_corpus, GrammarConfig};
use crate::corpus::{encode_example, load_dialogs, make_examples, save_dialogs, split_dialogs, Dialog, EncodeOptions, Speaker};
use crate::decoding::{generate, BeamConfig};
use crate::equiv::{run_equivalence, variant_gradcheck, Fault};
use crate::error::{Error, Result};
use crate::masking::{build_ct_mask, build_layout, build_ut_mask, CtScheme};
use crate::metrics::{bleu, entity_f1, inform_rate, placeholder_lexicon, success_rate, DialogResult, EvalReport};
use crate::models::ModelVariant;
use crate::train::{train, EpochLog};
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "htenc", version, about = "Hierarchical transformer encoders for dialog response generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model variant on a JSONL corpus.
    Train(Box<TrainArgs>),
    /// Beam-decode responses for every system turn of a corpus.
    Generate(GenerateArgs),
    /// Score generations against a corpus.
    Evaluate(EvaluateArgs),
    /// Print the utterance and context masks of a layout.
    MaskDump(MaskDumpArgs),
    /// Hierarchical-equivalence and gradient self-test on random tiny models.
    EquivCheck(EquivArgs),
    /// Write a synthetic task-oriented corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Flat JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Where the best checkpoint is written.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch JSONL log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub m_shared: Option<usize>,
    #[arg(long)]
    pub n_context: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub ffn_inner: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub ct_scheme: Option<CtScheme>,
    #[arg(long)]
    pub max_context_len: Option<usize>,
    #[arg(long)]
    pub vocab_cap: Option<usize>,
    /// Act label inventory, one label per line.
    #[arg(long)]
    pub act_labels: Option<PathBuf>,
    /// Enforce the hyperparameter search ranges.
    #[arg(long)]
    pub strict_bounds: bool,
}

impl TrainArgs {
    /// The configuration file (if any) with flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        macro_rules! set_opt {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = Some(v.clone()); } )* };
        }
        set!(variant, epochs, patience, batch_size, seed, lr, max_context_len, vocab_cap);
        set_opt!(corpus, checkpoint, log, m_shared, n_context, decoder_layers, hidden, heads, embed, ffn_inner, dropout, ct_scheme, act_labels);
        c.strict_bounds |= self.strict_bounds;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output JSONL; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub width: usize,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// Worker threads for decoding.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Which dialogs to decode.
    #[arg(long, value_enum, default_value_t = Split::All)]
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    All,
    Train,
    Valid,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generations: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// EvalReport JSON; the text table always goes to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskDumpArgs {
    /// Utterance lengths, comma separated, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lengths: Vec<usize>,
    #[arg(long, default_value = "HIER")]
    pub scheme: CtScheme,
    /// JSON sidecar path.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EquivArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random encoder cases for the equivalence check.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    /// Parameters sampled per variant in the gradient check.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Dropout makes the comparison meaningless; only allowed with --test-mode.
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long)]
    pub test_mode: bool,
    /// Negative control: corrupt the utterance mask (requires --test-mode).
    #[arg(long)]
    pub inject_mask_fault: bool,
    /// Skip the gradient checks.
    #[arg(long)]
    pub skip_gradcheck: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Grammar configuration JSON.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    match cli.command {
        Command::Train(a) => cmd_train(&a.resolve()?).map(|_| ()),
        Command::Generate(a) => cmd_generate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|r| {
            print!("{r}");
        }),
        Command::MaskDump(a) => cmd_mask_dump(&a).map(|s| print!("{s}")),
        Command::EquivCheck(a) => cmd_equiv_check(&a).map(|r| print!("{}", r.text)),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("missing --{what}")))
}

/// Trains, writes the best checkpoint and the per-epoch log.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<EpochLog>> {
    let corpus = required(&cfg.corpus, "corpus")?;
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    let dialogs = load_dialogs(corpus)?;
    let mut log_file = match &cfg.log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut io_err = None;
    let outcome = train(cfg, &dialogs, |e| {
        if let Some(w) = log_file.as_mut() {
            let line = serde_json::to_string(e).expect("epoch log serializes");
            if let Err(err) = writeln!(w, "{line}") {
                io_err.get_or_insert(err);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    checkpoint::save(ckpt, &outcome.model, &outcome.vocab, outcome.act_vocab.as_ref())?;
    log::info!("best epoch {} written to {}", outcome.best_epoch, ckpt.display());
    Ok(outcome.log)
}

/// One line of `generate` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub dialog_id: String,
    pub turn: usize,
    pub context: Vec<Vec<String>>,
    pub hypotheses: Vec<ScoredTokens>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub belief: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTokens {
    pub tokens: Vec<String>,
    pub score: f64,
}

/// Corpora where more than half of the tokens are unknown to the
/// checkpoint's vocabulary are rejected.
pub const MAX_OOV_RATE: f64 = 0.5;

/// Decodes every system turn of `dialogs` with the checkpoint's model.
pub fn generate_records(ck: &checkpoint::Checkpoint, dialogs: &[Dialog], beam: &BeamConfig, jobs: usize) -> Result<Vec<GenerationRecord>> {
    let vocab = &ck.header.vocab;
    let oov = vocab.oov_rate(dialogs);
    if oov > MAX_OOV_RATE {
        return Err(Error::Compatibility(format!(
            "{:.0}% of corpus tokens are outside the checkpoint vocabulary",
            100.0 * oov
        )));
    }
    let model = &ck.model;
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Compatibility("vocabulary size differs from the model's".into()));
    }
    let av = ck.header.act_labels.as_ref();
    if model.config.variant.act_conditioning() && av.is_none() {
        return Err(Error::Compatibility("act-conditioned model without act labels".into()));
    }
    let opts = EncodeOptions {
        cls: model.config.variant.uses_cls(),
        max_context_len: model.config.max_context_len,
        act_vocab: av,
    };
    let examples: Vec<_> = dialogs.iter().flat_map(|d| make_examples(d, None)).collect();
    let work = |ex: &crate::corpus::Example| -> Result<GenerationRecord> {
        let enc = encode_example(ex, vocab, &opts)?;
        let act = if model.config.variant.act_conditioning() {
            Some(enc.act.as_ref().ok_or_else(|| {
                Error::Annotation(format!("{} turn {} has no act labels", ex.dialog_id, ex.turn))
            })?)
        } else {
            None
        };
        let g = generate(model, &enc.context, act, beam)?;
        Ok(GenerationRecord {
            dialog_id: ex.dialog_id.clone(),
            turn: ex.turn,
            context: ex.context.clone(),
            hypotheses: g
                .hypotheses
                .iter()
                .map(|h| ScoredTokens {
                    tokens: vocab.decode(&h.tokens),
                    score: h.score(beam.length_alpha),
                })
                .collect(),
            belief: g.belief.map(|b| vocab.decode(&b)),
            act: g.act.map(|a| vocab.decode(&a)),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| examples.par_iter().map(work).collect())
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let all = load_dialogs(&a.corpus)?;
    let dialogs = match a.split {
        Split::All => all,
        Split::Train => split_dialogs(&all).0,
        Split::Valid => split_dialogs(&all).1,
    };
    let beam = BeamConfig {
        width: a.width,
        max_len: a.max_len,
        length_alpha: a.alpha,
    };
    let records = generate_records(&ck, &dialogs, &beam, a.jobs)?;
    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for r in &records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reference responses written as generation records (a perfect system).
pub fn reference_records(dialogs: &[Dialog]) -> Vec<GenerationRecord> {
    dialogs
        .iter()
        .flat_map(|d| make_examples(d, None))
        .map(|ex| GenerationRecord {
            dialog_id: ex.dialog_id,
            turn: ex.turn,
            context: ex.context,
            hypotheses: vec![ScoredTokens {
                tokens: ex.target,
                score: 0.0,
            }],
            belief: None,
            act: None,
        })
        .collect()
}

/// Scores the top hypothesis of every record against `dialogs`.
pub fn evaluate_records(records: &[GenerationRecord], dialogs: &[Dialog]) -> Result<EvalReport> {
    let by_id: HashMap<&str, &Dialog> = dialogs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut refs = Vec::with_capacity(records.len());
    let mut hyps = Vec::with_capacity(records.len());
    let mut per_dialog: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for r in records {
        let d = by_id
            .get(r.dialog_id.as_str())
            .ok_or_else(|| Error::Alignment(format!("dialog {} is not in the corpus", r.dialog_id)))?;
        let turn = d
            .turns
            .get(r.turn)
            .filter(|t| t.spk == Speaker::System)
            .ok_or_else(|| Error::Alignment(format!("dialog {} has no system turn {}", r.dialog_id, r.turn)))?;
        let best = r.hypotheses.first().map(|h| h.tokens.clone()).unwrap_or_default();
        refs.push(turn.text.clone());
        per_dialog.entry(r.dialog_id.as_str()).or_default().push(best.clone());
        hyps.push(best);
    }
    if records.is_empty() {
        return Err(Error::Alignment("no generations to evaluate".into()));
    }
    let lexicon = placeholder_lexicon(dialogs.iter().flat_map(|d| d.turns.iter().map(|t| &t.text)));
    let results: Vec<DialogResult> = per_dialog
        .into_iter()
        .map(|(id, responses)| {
            let d = by_id[id];
            DialogResult {
                dialog_id: id.to_string(),
                goal_entities: d.goal_entities(),
                requested: d.requested(),
                responses,
            }
        })
        .collect();
    Ok(EvalReport::new(
        bleu(&refs, &hyps)?,
        entity_f1(&refs, &hyps, &lexicon)?,
        inform_rate(&results)?,
        success_rate(&results)?,
    ))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<EvalReport> {
    let records = read_generations(&a.generations)?;
    let dialogs = load_dialogs(&a.corpus)?;
    let report = evaluate_records(&records, &dialogs)?;
    if let Some(p) = &a.output {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDump {
    pub lengths: Vec<usize>,
    pub scheme: CtScheme,
    /// Side length of both masks.
    pub n: usize,
    pub utterance_index: Vec<usize>,
    pub local_position: Vec<usize>,
    pub ut_mask: Vec<String>,
    pub ct_mask: Vec<String>,
}

pub fn mask_dump(lengths: &[usize], scheme: CtScheme) -> Result<MaskDump> {
    let layout = build_layout(lengths)?;
    Ok(MaskDump {
        lengths: lengths.to_vec(),
        scheme,
        n: layout.len(),
        utterance_index: layout.utterance_index().to_vec(),
        local_position: layout.local_position().to_vec(),
        ut_mask: build_ut_mask(&layout).to_bitstrings(),
        ct_mask: build_ct_mask(&layout, scheme)?.to_bitstrings(),
    })
}

/// Text rendering of both masks; writes the JSON sidecar when asked.
pub fn cmd_mask_dump(a: &MaskDumpArgs) -> Result<String> {
    let dump = mask_dump(&a.lengths, a.scheme)?;
    let layout = build_layout(&a.lengths)?;
    let mut s = String::new();
    s.push_str(&format!("lengths         {:?}\n", dump.lengths));
    s.push_str(&format!("utterance index {:?}\n", dump.utterance_index));
    s.push_str(&format!("local position  {:?}\n\nUT-Mask\n", dump.local_position));
    s.push_str(&build_ut_mask(&layout).to_string());
    s.push_str(&format!("\nCT-Mask ({})\n", a.scheme));
    s.push_str(&build_ct_mask(&layout, a.scheme)?.to_string());
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_string_pretty(&dump)?)?;
    }
    Ok(s)
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivReport {
    pub passed: bool,
    pub max_deviation: f64,
    pub gradcheck: Vec<(String, f64)>,
    #[serde(skip)]
    pub text: String,
}

pub const EQUIV_TOLERANCE: f64 = 1e-9;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Runs both self-tests. A failed check is reported as
/// [`Error::Integrity`] carrying the report text.
pub fn cmd_equiv_check(a: &EquivArgs) -> Result<EquivReport> {
    if a.dropout > 0.0 && !a.test_mode {
        return Err(Error::Config("equivalence checks need dropout 0 (use --test-mode to override)".into()));
    }
    if a.inject_mask_fault && !a.test_mode {
        return Err(Error::Config("--inject-mask-fault requires --test-mode".into()));
    }
    if a.dropout > 0.0 {
        log::warn!("dropout {} requested; the deterministic checks run without it", a.dropout);
    }
    let fault = if a.inject_mask_fault {
        Fault::LeakUtteranceMask
    } else {
        Fault::None
    };
    let eq = run_equivalence(a.seed, a.cases, fault)?;
    let mut passed = eq.max_deviation < EQUIV_TOLERANCE;
    let mut text = format!(
        "hierarchical equivalence: {} cases, max |Δ| = {:.3e} [{}]\n",
        eq.cases,
        eq.max_deviation,
        if passed { "PASS" } else { "FAIL" }
    );
    let mut grads = Vec::new();
    if !a.skip_gradcheck {
        for v in ModelVariant::ALL {
            let r = variant_gradcheck(v, a.seed, a.samples, a.epsilon)?;
            let ok = r.max_rel_error < GRADCHECK_TOLERANCE;
            passed &= ok;
            text.push_str(&format!(
                "gradient check {:<10} {} samples, max rel err = {:.3e} [{}]\n",
                v.name(),
                r.samples.len(),
                r.max_rel_error,
                if ok { "PASS" } else { "FAIL" }
            ));
            grads.push((v.name().to_string(), r.max_rel_error));
        }
    }
    text.push_str(if passed { "PASS\n" } else { "FAIL\n" });
    let report = EquivReport {
        passed,
        max_deviation: eq.max_deviation,
        gradcheck: grads,
        text,
    };
    if !report.passed {
        return Err(Error::Integrity(format!("self-test failed\n{}", report.text)));
    }
    Ok(report)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let grammar = match &a.grammar {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => GrammarConfig::default(),
    };
    let dialogs = generate_synthetic_corpus(a.seed, a.n, &grammar)?;
    save_dialogs(&a.output, &dialogs)
}
