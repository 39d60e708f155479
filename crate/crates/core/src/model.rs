//! The full detector: per-chunk encoder followed by the chunk aggregator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{self, AggregationOutput, AggregatorConfig, AggregatorParams, AggregatorTrace};
use crate::chunker::{make_pair, ChunkPlan, ChunkedPair};
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{join, Dropout, ParamTree};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub plan: ChunkPlan,
    #[serde(default)]
    pub aggregator: AggregatorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.plan.validate()?;
        if self.encoder.max_positions < self.plan.chunk_size {
            return Err(Error::Config(format!(
                "max positions {} below chunk size {}",
                self.encoder.max_positions, self.plan.chunk_size
            )));
        }
        let heads = self.aggregator.heads;
        if heads == 0 || !self.encoder.dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {heads} aggregator heads",
                self.encoder.dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams<T> {
    pub encoder: EncoderParams<T>,
    pub aggregator: AggregatorParams<T>,
}

pub type DetectorWeights = DetectorParams<Tensor>;

impl<T> ParamTree for DetectorParams<T> {
    type Leaf = T;
    type Mapped<U> = DetectorParams<U>;

    fn map<'a, U>(&'a self, f: &mut dyn FnMut(&'a T) -> U) -> DetectorParams<U> {
        DetectorParams {
            encoder: self.encoder.map(f),
            aggregator: self.aggregator.map(f),
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.encoder.visit(&join(name, "encoder"), f);
        self.aggregator.visit(&join(name, "aggregator"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.encoder.visit_mut(f);
        self.aggregator.visit_mut(f);
    }
}

impl DetectorWeights {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(DetectorParams {
            encoder: EncoderParams::init(&cfg.encoder, &mut rng)?,
            aggregator: AggregatorParams::init(&cfg.aggregator, cfg.encoder.dim, &cfg.plan, &mut rng)?,
        })
    }
}

/// Taped forward for one chunked pair. All real chunks go through the
/// encoder as one batch; empty slots get zero rows.
pub fn forward_tape(
    tape: &mut Tape,
    p: &DetectorParams<Var>,
    cfg: &ModelConfig,
    pair: &ChunkedPair,
    dropout: &mut Dropout,
) -> Result<AggregatorTrace> {
    let plan = &cfg.plan;
    if pair.plan != *plan {
        return Err(Error::Contract("pair was chunked with a different plan".into()));
    }
    let slots = pair.real_slots();
    if slots.is_empty() {
        return Err(Error::AllChunksMasked);
    }
    let chunks: Vec<&[u32]> = slots.iter().map(|&s| pair.chunk(s)).collect();
    let masks: Vec<&[bool]> = slots.iter().map(|&s| pair.token_masks[s].as_slice()).collect();
    let trace = encoder::encode_chunks_tape(tape, &p.encoder, &cfg.encoder, &chunks, &masks, dropout)?;

    let n_ctx = slots.iter().filter(|&&s| s < plan.k_ctx).count();
    let ctx = side_reps(tape, trace.cls, &slots[..n_ctx], 0, 0, plan.k_ctx, cfg.encoder.dim)?;
    let resp = side_reps(tape, trace.cls, &slots[n_ctx..], n_ctx, plan.k_ctx, plan.k_resp, cfg.encoder.dim)?;
    aggregator::aggregate_tape(tape, &p.aggregator, &cfg.aggregator, ctx, resp, &pair.chunk_mask, dropout)
}

/// Places encoded rows `first..first + slots.len()` of `cls` at their slot
/// positions in a zero-filled `[k × d]` matrix.
fn side_reps(tape: &mut Tape, cls: Var, slots: &[usize], first: usize, base: usize, k: usize, d: usize) -> Result<Var> {
    if slots.is_empty() {
        return Ok(tape.constant(Tensor::zeros([k, d])));
    }
    let picked: Vec<usize> = (first..first + slots.len()).collect();
    let rows = tape.rows(cls, &picked)?;
    let index: Vec<usize> = slots.iter().map(|&s| s - base).collect();
    tape.scatter_rows(rows, &index, k)
}

/// Trained detector bundled with its tokenizer.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub weights: DetectorWeights,
    pub vocab: Vocab,
}

impl Detector {
    pub fn new(config: ModelConfig, weights: DetectorWeights, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() > config.encoder.vocab_size {
            return Err(Error::Config(format!(
                "vocab of {} tokens exceeds embedding table of {}",
                vocab.len(),
                config.encoder.vocab_size
            )));
        }
        Ok(Detector { config, weights, vocab })
    }

    pub fn prepare(&self, context: &str, response: &str) -> Result<ChunkedPair> {
        make_pair(&self.vocab.encode(context), &self.vocab.encode(response), &self.config.plan)
    }

    pub fn score(&self, context: &str, response: &str) -> Result<AggregationOutput> {
        let pair = self.prepare(context, response)?;
        Ok(self.score_pairs(&[pair])?.remove(0))
    }

    /// Scores several pairs, encoding all their real chunks in one batch.
    pub fn score_pairs(&self, pairs: &[ChunkedPair]) -> Result<Vec<AggregationOutput>> {
        let cfg = &self.config;
        let d = cfg.encoder.dim;
        let mut chunks: Vec<&[u32]> = Vec::new();
        let mut masks: Vec<&[bool]> = Vec::new();
        for pair in pairs {
            if pair.plan != cfg.plan {
                return Err(Error::Contract("pair was chunked with a different plan".into()));
            }
            for s in pair.real_slots() {
                chunks.push(pair.chunk(s));
                masks.push(&pair.token_masks[s]);
            }
        }
        if chunks.is_empty() {
            return Err(Error::AllChunksMasked);
        }
        let cls = encoder::encode_chunks(&self.weights.encoder, &cfg.encoder, &chunks, &masks)?;

        let mut row = 0;
        let mut out = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let plan = cfg.plan;
            let mut ctx = Tensor::zeros([plan.k_ctx, d]);
            let mut resp = Tensor::zeros([plan.k_resp, d]);
            for s in pair.real_slots() {
                let (dst, r) = if s < plan.k_ctx { (&mut ctx, s) } else { (&mut resp, s - plan.k_ctx) };
                dst.data_mut()[r * d..(r + 1) * d].copy_from_slice(cls.row(row));
                row += 1;
            }
            out.push(aggregator::aggregate(
                &self.weights.aggregator,
                &cfg.aggregator,
                &ctx,
                &resp,
                &pair.chunk_mask,
            )?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bind;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                layers: 2,
                heads: 2,
                dim: 8,
                ffn_dim: 16,
                max_positions: 8,
                vocab_size: 40,
                dropout: 0.0,
            },
            plan: ChunkPlan::new(8, 4, 2).unwrap(),
            aggregator: AggregatorConfig {
                heads: 2,
                ..Default::default()
            },
        }
    }

    fn detector() -> Detector {
        let corpus = ["the army is weak and the city is old . mercenaries are useless ."];
        let vocab = Vocab::build(&corpus, 40).unwrap();
        let cfg = tiny_config();
        let w = DetectorWeights::init(&cfg, 3).unwrap();
        Detector::new(cfg, w, vocab).unwrap()
    }

    #[test]
    fn batched_scoring_matches_single_and_tape() {
        let det = detector();
        let a = det.prepare("the army is weak . the city is old . the army is old .", "the army is weak .").unwrap();
        let b = det.prepare("mercenaries are useless .", "mercenaries are not useless .").unwrap();
        let both = det.score_pairs(&[a.clone(), b.clone()]).unwrap();
        let single = det.score_pairs(std::slice::from_ref(&b)).unwrap();
        assert!((both[1].logit - single[0].logit).abs() < 1e-12);

        let mut tape = Tape::new();
        let p = bind(&mut tape, &det.weights, false);
        let t = forward_tape(&mut tape, &p, &det.config, &a, &mut Dropout::disabled()).unwrap();
        assert!((tape.value(t.logit)[0] - both[0].logit).abs() < 1e-10);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = tiny_config();
        cfg.encoder.max_positions = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.aggregator.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parameter_names_are_unique() {
        let w = DetectorWeights::init(&tiny_config(), 0).unwrap();
        let names: Vec<String> = w.named_leaves().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.contains(&"encoder.layers.1.ffn.down.bias".to_string()));
        assert!(names.contains(&"aggregator.head.weight".to_string()));
    }
}
