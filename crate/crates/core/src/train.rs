//! Training loop with validation-based early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cli::config::RunConfig;
use crate::corpus::{
    batch_examples, build_vocab, encode_example, make_examples, split_dialogs, ContextBatch, Dialog, EncodeOptions,
    EncodedExample, Vocab,
};
use crate::error::{Error, Result};
use crate::models::{build_model, ActVocab, Model, ModelConfig, StepLoss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation split is empty.
    pub valid_loss: Option<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation (or training) loss.
    pub model: Model,
    pub vocab: Vocab,
    pub act_vocab: Option<ActVocab>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub train_dialogs: Vec<Dialog>,
    pub valid_dialogs: Vec<Dialog>,
}

/// Encodes every system turn of `dialogs` for `config`.
pub fn encode_dialogs(
    dialogs: &[Dialog],
    vocab: &Vocab,
    config: &ModelConfig,
    act_vocab: Option<&ActVocab>,
) -> Result<Vec<EncodedExample>> {
    let opts = EncodeOptions {
        cls: config.variant.uses_cls(),
        max_context_len: config.max_context_len,
        act_vocab,
    };
    let mut out = Vec::new();
    for d in dialogs {
        for ex in make_examples(d, None) {
            out.push(encode_example(&ex, vocab, &opts)?);
        }
    }
    Ok(out)
}

/// Token-weighted mean loss over `batches` without updates.
pub fn dataset_loss(model: &Model, batches: &[ContextBatch]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for b in batches {
        let l = model.evaluate_loss(b)?;
        sum += l.total * l.tokens as f64;
        count += l.tokens;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(sum / count as f64)
}

fn act_vocab_for(cfg: &RunConfig) -> Result<ActVocab> {
    match &cfg.act_labels {
        Some(p) => ActVocab::load(p),
        None => Ok(ActVocab::default_labels()),
    }
}

/// Seed of the dropout stream for optimizer step `step`.
fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step
}

/// Trains `cfg.variant` on the training split of `dialogs`.
///
/// Each epoch shuffles the training examples with a seed derived from
/// `cfg.seed`, so identical configurations give identical results. After
/// `cfg.patience` consecutive epochs without a lower validation loss
/// training stops (with patience 0, after the first such epoch).
pub fn train(cfg: &RunConfig, dialogs: &[Dialog], mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_d, valid_d) = split_dialogs(dialogs);
    if train_d.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let vocab = build_vocab(&train_d, cfg.vocab_cap)?;
    let act_vocab = act_vocab_for(cfg)?;
    let model_cfg = cfg.model_config(vocab.len(), act_vocab.dim())?;
    let uses_acts = model_cfg.variant.act_conditioning();
    let av = uses_acts.then_some(&act_vocab);
    let mut model = build_model(model_cfg.clone(), cfg.seed, cfg.strict_bounds)?;

    let mut train_ex = encode_dialogs(&train_d, &vocab, &model_cfg, av)?;
    if train_ex.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let valid_ex = encode_dialogs(&valid_d, &vocab, &model_cfg, av)?;
    let valid_batches = batch_examples(&valid_ex, cfg.batch_size)?;
    let adam = cfg.adam();

    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut bad_epochs = 0;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
        train_ex.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in batch_examples(&train_ex, cfg.batch_size)? {
            let seed = step_seed(cfg.seed, model.params.step());
            let StepLoss { total, tokens, .. } = model.training_step(&batch, &adam, seed)?;
            sum += total * tokens as f64;
            count += tokens;
        }
        let train_loss = sum / count.max(1) as f64;
        let valid_loss = if valid_batches.is_empty() {
            None
        } else {
            Some(dataset_loss(&model, &valid_batches)?)
        };
        let monitored = valid_loss.unwrap_or(train_loss);
        let improved = monitored < best.0;
        if improved {
            best = (monitored, epoch, model.params.clone());
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            valid_loss,
            improved,
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.4} valid {}",
            valid_loss.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        on_epoch(&entry);
        log.push(entry);
        if !improved && bad_epochs >= cfg.patience {
            break;
        }
    }
    model.params = best.2;
    Ok(TrainOutcome {
        model,
        vocab,
        act_vocab: uses_acts.then_some(act_vocab),
        log,
        best_epoch: best.1,
        train_dialogs: train_d,
        valid_dialogs: valid_d,
    })
}
