//! Supervised training of the detector and checkpoint persistence.

pub mod checkpoint;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use optim::{clip_global_norm, AdamW, DecaySchedule, LrSchedule};

use crate::chunker::{make_pair, ChunkedPair};
use crate::data::{Label, LabeledExample};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{forward_tape, Detector, DetectorWeights, ModelConfig};
use crate::nn::{bind, Dropout, ParamTree};
use crate::synthesis::derive_seed;
use crate::tensor::Tape;
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Train on the first N examples in file order.
    #[serde(default)]
    pub train_subset_size: Option<usize>,
    #[serde(default)]
    pub decay: DecaySchedule,
    /// Global-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    /// Single-threaded gradient computation. Both modes reduce gradients in
    /// example order, so results agree either way.
    #[serde(default = "default_true")]
    pub deterministic: bool,
    /// Fraction of the training data held out for dev metrics when no dev
    /// file is given.
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
    #[serde(default = "default_vocab_size")]
    pub max_vocab: usize,
    /// Optional first stage on contexts cut to one chunk. A from-scratch
    /// encoder learns response features far faster when the response chunk
    /// is not diluted among many context slots.
    #[serde(default)]
    pub warm_start: Option<WarmStart>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStart {
    pub epochs: usize,
    pub learning_rate: f64,
}

fn default_lr() -> f64 {
    2e-6
}
fn default_wd() -> f64 {
    0.1
}
fn default_warmup() -> usize {
    1000
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_true() -> bool {
    true
}
fn default_dev_fraction() -> f64 {
    0.1
}
fn default_vocab_size() -> usize {
    8000
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            warmup_steps: default_warmup(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            train_subset_size: None,
            decay: DecaySchedule::Constant,
            clip_norm: default_clip(),
            deterministic: true,
            dev_fraction: default_dev_fraction(),
            max_vocab: default_vocab_size(),
            warm_start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if self.weight_decay < 0.0 || self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("weight decay and clip norm must be non-negative".into()));
        }
        if self.warm_start.as_ref().is_some_and(|w| !(w.learning_rate > 0.0)) {
            return Err(Error::Config("warm-start learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config("dev fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            peak: self.learning_rate,
            warmup: self.warmup_steps,
            total: steps_per_epoch * self.epochs,
            decay: self.decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub dev: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Best-dev weights, or the final ones without dev data.
    pub weights: DetectorWeights,
    pub history: Vec<EpochRecord>,
    /// Epochs of the short-context stage, if any.
    pub warm_start_history: Vec<EpochRecord>,
    /// Optimizer steps of the main stage.
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_metrics: Option<MetricsReport>,
}

/// Tokenized and chunked training item.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub pair: ChunkedPair,
    pub label: Label,
}

pub fn prepare(examples: &[LabeledExample], vocab: &Vocab, cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    examples
        .par_iter()
        .map(|ex| {
            Ok(Prepared {
                id: ex.id.clone(),
                pair: make_pair(&vocab.encode(&ex.context), &vocab.encode(&ex.response), &cfg.plan)?,
                label: ex.label,
            })
        })
        .collect()
}

/// Loss and parameter gradients (in [`ParamTree`] order) for one example.
pub fn example_gradients(
    weights: &DetectorWeights,
    cfg: &ModelConfig,
    item: &Prepared,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, weights, true);
    let mut dropout = match dropout_seed {
        Some(seed) => Dropout::new(cfg.encoder.dropout, seed),
        None => Dropout::disabled(),
    };
    let trace = forward_tape(&mut tape, &p, cfg, &item.pair, &mut dropout)?;
    let loss = tape.bce_with_logits(trace.logit, &[item.label.target()])?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(loss)?;
    let out = p
        .leaves()
        .into_iter()
        .zip(weights.leaves())
        .map(|(&v, w)| grads.take(v).unwrap_or_else(|| vec![0.0; w.len()]))
        .collect();
    Ok((value, out))
}

/// Scores prepared items with the tape-free path, in batches.
pub fn score_prepared(detector: &Detector, items: &[Prepared], batch: usize) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let pairs: Vec<ChunkedPair> = chunk.iter().map(|p| p.pair.clone()).collect();
        scores.extend(detector.score_pairs(&pairs)?.into_iter().map(|o| o.probability));
    }
    Ok(scores)
}

fn evaluate(detector: &Detector, dev: &[Prepared]) -> Result<MetricsReport> {
    let scores = score_prepared(detector, dev, 8)?;
    let labels: Vec<Label> = dev.iter().map(|p| p.label).collect();
    MetricsReport::compute(&scores, &labels, 0.5)
}

/// Mini-batch AdamW on mean binary cross-entropy. Dev metrics are computed
/// after every epoch and the weights with the best dev ROC AUC are kept.
/// With [`TrainConfig::warm_start`], a first stage trains on contexts cut to
/// one chunk before the main stage starts from its weights.
pub fn train(
    weights: DetectorWeights,
    vocab: &Vocab,
    train_set: &[LabeledExample],
    dev_set: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let model = &cfg.model;
    let subset = cfg.train_subset_size.unwrap_or(train_set.len()).min(train_set.len());
    let train_items = prepare(&train_set[..subset], vocab, model)?;
    if train_items.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let dev_items = prepare(dev_set, vocab, model)?;
    let mut detector = Detector::new(model.clone(), weights, vocab.clone())?;

    let mut warm_start_history = Vec::new();
    if let Some(ws) = &cfg.warm_start {
        let short = prepare_short(&train_set[..subset], vocab, model)?;
        let stage = Stage {
            learning_rate: ws.learning_rate,
            epochs: ws.epochs,
            seed: derive_seed(cfg.seed, 0x5757),
        };
        let out = fit(&mut detector, &short, &[], cfg, &stage)?;
        warm_start_history = out.history;
    }

    let stage = Stage {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        seed: cfg.seed,
    };
    let out = fit(&mut detector, &train_items, &dev_items, cfg, &stage)?;
    let (weights, best_epoch, best_metrics) = match out.best {
        Some((_, e, w, m)) => (w, Some(e), Some(m)),
        None => (detector.weights, None, None),
    };
    Ok(TrainOutput {
        weights,
        history: out.history,
        warm_start_history,
        steps: out.steps,
        best_epoch,
        best_metrics,
    })
}

/// Like [`prepare`], with each context cut to the payload of one chunk.
fn prepare_short(examples: &[LabeledExample], vocab: &Vocab, cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    let keep = cfg.plan.chunk_size - 1;
    examples
        .par_iter()
        .map(|ex| {
            let mut ctx = vocab.encode(&ex.context);
            ctx.truncate(keep);
            Ok(Prepared {
                id: ex.id.clone(),
                pair: make_pair(&ctx, &vocab.encode(&ex.response), &cfg.plan)?,
                label: ex.label,
            })
        })
        .collect()
}

struct Stage {
    learning_rate: f64,
    epochs: usize,
    seed: u64,
}

struct StageOutput {
    history: Vec<EpochRecord>,
    steps: usize,
    best: Option<(f64, usize, DetectorWeights, MetricsReport)>,
}

/// One training stage with a fresh optimizer and schedule.
fn fit(
    detector: &mut Detector,
    train_items: &[Prepared],
    dev_items: &[Prepared],
    cfg: &TrainConfig,
    stage: &Stage,
) -> Result<StageOutput> {
    let model = &cfg.model;
    let sizes: Vec<usize> = detector.weights.leaves().iter().map(|t| t.len()).collect();
    let decay_mask: Vec<bool> = detector.weights.leaves().iter().map(|t| t.shape().len() >= 2).collect();
    let mut opt = AdamW::new(&sizes, cfg.weight_decay);
    let steps_per_epoch = train_items.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        peak: stage.learning_rate,
        warmup: cfg.warmup_steps,
        total: steps_per_epoch * stage.epochs,
        decay: cfg.decay,
    };

    let mut step = 0;
    let mut history = Vec::with_capacity(stage.epochs);
    let mut best: Option<(f64, usize, DetectorWeights, MetricsReport)> = None;

    for epoch in 0..stage.epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(stage.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let dropout_seed = |k: usize| derive_seed(derive_seed(stage.seed ^ 0xD80F, step as u64), k as u64);
            let run = |(k, &i): (usize, &usize)| {
                example_gradients(&detector.weights, model, &train_items[i], Some(dropout_seed(k)))
            };
            let results: Vec<(f64, Vec<Vec<f64>>)> = if cfg.deterministic {
                batch.iter().enumerate().map(run).collect::<Result<_>>()?
            } else {
                batch.par_iter().enumerate().map(run).collect::<Result<_>>()?
            };
            if results.iter().any(|(l, _)| !l.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    ids: batch.iter().map(|&i| train_items[i].id.clone()).collect(),
                });
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for (loss, g) in &results {
                loss_sum += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, x) in acc.iter_mut().zip(gi) {
                        *a += x;
                    }
                }
            }
            for g in grads.iter_mut().flatten() {
                *g *= scale;
            }
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            step += 1;
            let lr = schedule.lr_at(step);
            opt.step_tree(&mut detector.weights, &grads, &decay_mask, lr);
        }

        let train_loss = loss_sum / train_items.len() as f64;
        let dev = if dev_items.is_empty() {
            None
        } else {
            Some(evaluate(detector, dev_items)?)
        };
        log::info!(
            "epoch {epoch} step {step} loss {train_loss:.4} dev auc {:?} bacc {:?}",
            dev.as_ref().and_then(|d| d.roc_auc),
            dev.as_ref().map(|d| d.balanced_accuracy)
        );
        if let Some(d) = &dev {
            let key = d.roc_auc.unwrap_or(d.balanced_accuracy);
            if best.as_ref().is_none_or(|(k, ..)| key > *k) {
                best = Some((key, epoch, detector.weights.clone(), d.clone()));
            }
        }
        history.push(EpochRecord {
            epoch,
            step,
            learning_rate: schedule.lr_at(step),
            train_loss,
            dev,
        });
    }
    Ok(StageOutput { history, steps: step, best })
}
