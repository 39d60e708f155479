//! Small pre-norm transformer encoder producing one CLS vector per chunk.
//!
//! Two forward paths share the same kernels: a taped one for training and a
//! tape-free one for inference, which also handles long sequences by
//! blocking attention over query rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chunker::ChunkedPair;
use crate::error::{Error, Result};
use crate::nn::{join, Attention, AttentionShape, Dropout, FeedForward, Norm, ParamTree};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Query rows per attention block in the tape-free path.
const QUERY_BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::Config("vocab size and max positions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn_norm: Norm<T>,
    pub attention: Attention<T>,
    pub ffn_norm: Norm<T>,
    pub ffn: FeedForward<T>,
}

impl<T> ParamTree for EncoderLayer<T> {
    type Leaf = T;
    type Mapped<U> = EncoderLayer<U>;

    fn map<'a, U>(&'a self, f: &mut dyn FnMut(&'a T) -> U) -> EncoderLayer<U> {
        EncoderLayer {
            attn_norm: self.attn_norm.map(f),
            attention: self.attention.map(f),
            ffn_norm: self.ffn_norm.map(f),
            ffn: self.ffn.map(f),
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.attn_norm.visit(&join(name, "attn_norm"), f);
        self.attention.visit(&join(name, "attention"), f);
        self.ffn_norm.visit(&join(name, "ffn_norm"), f);
        self.ffn.visit(&join(name, "ffn"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.attn_norm.visit_mut(f);
        self.attention.visit_mut(f);
        self.ffn_norm.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<EncoderLayer<T>>,
    pub final_norm: Norm<T>,
}

pub type EncoderWeights = EncoderParams<Tensor>;

impl<T> ParamTree for EncoderParams<T> {
    type Leaf = T;
    type Mapped<U> = EncoderParams<U>;

    fn map<'a, U>(&'a self, f: &mut dyn FnMut(&'a T) -> U) -> EncoderParams<U> {
        EncoderParams {
            token_embedding: f(&self.token_embedding),
            position_embedding: f(&self.position_embedding),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            final_norm: self.final_norm.map(f),
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(&str, &'a T)) {
        f(&join(name, "token_embedding"), &self.token_embedding);
        f(&join(name, "position_embedding"), &self.position_embedding);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(name, &format!("layers.{i}")), f);
        }
        self.final_norm.visit(&join(name, "final_norm"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.token_embedding);
        f(&mut self.position_embedding);
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
    }
}

impl EncoderWeights {
    /// Normal(0, 0.02) matrices and embeddings, zero biases, unit gains.
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let layers = (0..cfg.layers)
            .map(|_| EncoderLayer {
                attn_norm: Norm::init(d),
                attention: Attention::init(d, rng),
                ffn_norm: Norm::init(d),
                ffn: FeedForward::init(d, cfg.ffn_dim, rng),
            })
            .collect();
        Ok(EncoderParams {
            token_embedding: Tensor::randn([cfg.vocab_size, d], crate::nn::INIT_STD, rng),
            position_embedding: Tensor::randn([cfg.max_positions, d], crate::nn::INIT_STD, rng),
            layers,
            final_norm: Norm::init(d),
        })
    }
}

fn check_inputs(cfg: &EncoderConfig, chunks: &[&[u32]], masks: &[&[bool]]) -> Result<usize> {
    if chunks.is_empty() || chunks.len() != masks.len() {
        return Err(Error::LengthMismatch(chunks.len(), masks.len()));
    }
    let seq = chunks[0].len();
    if seq == 0 || seq > cfg.max_positions {
        return Err(Error::Config(format!(
            "sequence length {seq} outside 1..={}",
            cfg.max_positions
        )));
    }
    for (ids, mask) in chunks.iter().zip(masks) {
        if ids.len() != seq || mask.len() != seq {
            return Err(Error::LengthMismatch(ids.len(), seq));
        }
        if !mask[0] {
            return Err(Error::Contract("position 0 must be an unmasked CLS slot".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: cfg.vocab_size,
            });
        }
    }
    Ok(seq)
}

/// Taped forward output for a batch of chunks.
pub struct EncoderTrace {
    /// `[B × d]` position-0 outputs.
    pub cls: Var,
    /// Attention probabilities per layer. Earlier layers are
    /// `[B·H × T × T]`; the last layer only computes the CLS query row,
    /// `[B·H × 1 × T]`.
    pub attention: Vec<Var>,
}

/// Taped encoder forward over `B` equal-length chunks.
pub fn encode_chunks_tape(
    tape: &mut Tape,
    p: &EncoderParams<Var>,
    cfg: &EncoderConfig,
    chunks: &[&[u32]],
    masks: &[&[bool]],
    dropout: &mut Dropout,
) -> Result<EncoderTrace> {
    let seq = check_inputs(cfg, chunks, masks)?;
    let batch = chunks.len();
    let ids: Vec<usize> = chunks.iter().flat_map(|c| c.iter().map(|&i| i as usize)).collect();
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let key_keep: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();

    let tok = tape.rows(p.token_embedding, &ids)?;
    let pos = tape.rows(p.position_embedding, &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut attention = Vec::with_capacity(p.layers.len());
    let n_layers = p.layers.len();

    for (li, layer) in p.layers.iter().enumerate() {
        let last = li + 1 == n_layers;
        let h = layer.attn_norm.forward(tape, x)?;
        // The last layer only needs the CLS rows downstream.
        let (queries, residual, q_len) = if last {
            (tape.rows(h, &cls_rows)?, tape.rows(x, &cls_rows)?, 1)
        } else {
            (h, x, seq)
        };
        let shape = AttentionShape {
            batch,
            q_len,
            kv_len: seq,
            heads: cfg.heads,
        };
        let (attn_out, probs) = layer.attention.forward(tape, queries, h, shape, &key_keep, dropout)?;
        attention.push(probs);
        let attn_out = dropout.apply(tape, attn_out)?;
        let x1 = tape.add(residual, attn_out)?;
        let h2 = layer.ffn_norm.forward(tape, x1)?;
        let f = layer.ffn.forward(tape, h2)?;
        let f = dropout.apply(tape, f)?;
        x = tape.add(x1, f)?;
    }
    let cls = p.final_norm.forward(tape, x)?;
    Ok(EncoderTrace { cls, attention })
}

/// Tape-free forward over `B` equal-length sequences. Returns `[B × d]`
/// position-0 outputs.
pub fn encode_chunks(w: &EncoderWeights, cfg: &EncoderConfig, chunks: &[&[u32]], masks: &[&[bool]]) -> Result<Tensor> {
    let seq = check_inputs(cfg, chunks, masks)?;
    let batch = chunks.len();
    let d = cfg.dim;
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = w.token_embedding.data();
    let pos = w.position_embedding.data();
    let mut x = vec![0.0; batch * seq * d];
    for (b, ids) in chunks.iter().enumerate() {
        for (t, &id) in ids.iter().enumerate() {
            let dst = &mut x[(b * seq + t) * d..(b * seq + t + 1) * d];
            let (e, p) = (&tok[id as usize * d..][..d], &pos[t * d..][..d]);
            for j in 0..d {
                dst[j] = e[j] + p[j];
            }
        }
    }

    let n_layers = w.layers.len();
    let mut scores = Vec::new();
    for (li, layer) in w.layers.iter().enumerate() {
        let last = li + 1 == n_layers;
        let rows = batch * seq;
        let h = layer.attn_norm.apply(&x);
        let k = layer.attention.key.apply(&h, rows);
        let v = layer.attention.value.apply(&h, rows);
        let q_len = if last { 1 } else { seq };
        let (q_src, residual) = if last {
            let pick = |src: &[f64]| -> Vec<f64> { (0..batch).flat_map(|b| src[b * seq * d..][..d].to_vec()).collect() };
            (pick(&h), pick(&x))
        } else {
            (h, std::mem::take(&mut x))
        };
        let q = layer.attention.query.apply(&q_src, batch * q_len);

        let mut ctx = vec![0.0; batch * q_len * d];
        for b in 0..batch {
            let keep = masks[b];
            for head in 0..heads {
                let col = head * dh;
                let mut r0 = 0;
                while r0 < q_len {
                    let blk = QUERY_BLOCK.min(q_len - r0);
                    scores.resize(blk * seq, 0.0);
                    kernels::gemm_strided(
                        blk,
                        dh,
                        seq,
                        &q[(b * q_len + r0) * d + col..],
                        d,
                        1,
                        &k[b * seq * d + col..],
                        1,
                        d,
                        &mut scores,
                        seq,
                        false,
                    );
                    for s in scores.iter_mut() {
                        *s *= scale;
                    }
                    let mut probs = vec![0.0; blk * seq];
                    let row_keep: Vec<bool> = (0..blk).flat_map(|_| keep.iter().copied()).collect();
                    kernels::softmax_rows(&scores, seq, Some(&row_keep), &mut probs)?;
                    kernels::gemm_strided(
                        blk,
                        seq,
                        dh,
                        &probs,
                        seq,
                        1,
                        &v[b * seq * d + col..],
                        d,
                        1,
                        &mut ctx[(b * q_len + r0) * d + col..],
                        d,
                        false,
                    );
                    r0 += blk;
                }
            }
        }
        let attn_out = layer.attention.output.apply(&ctx, batch * q_len);
        let mut x1 = residual;
        for (a, o) in x1.iter_mut().zip(&attn_out) {
            *a += o;
        }
        let h2 = layer.ffn_norm.apply(&x1);
        let f = layer.ffn.apply(&h2, batch * q_len);
        for (a, o) in x1.iter_mut().zip(&f) {
            *a += o;
        }
        x = x1;
    }
    let out = w.final_norm.apply(&x);
    Tensor::new([batch, d], out)
}

/// CLS vector for one chunk.
pub fn encode_chunk(w: &EncoderWeights, cfg: &EncoderConfig, chunk: &[u32], token_mask: &[bool]) -> Result<Tensor> {
    let out = encode_chunks(w, cfg, &[chunk], &[token_mask])?;
    out.reshape([cfg.dim])
}

/// Encodes every non-empty chunk of a pair. Rows of empty chunks are zero.
pub fn encode_pair(w: &EncoderWeights, cfg: &EncoderConfig, pair: &ChunkedPair) -> Result<(Tensor, Tensor)> {
    let d = cfg.dim;
    let plan = pair.plan;
    let mut ctx = Tensor::zeros([plan.k_ctx, d]);
    let mut resp = Tensor::zeros([plan.k_resp, d]);
    let slots = pair.real_slots();
    if slots.is_empty() {
        return Ok((ctx, resp));
    }
    let chunks: Vec<&[u32]> = slots.iter().map(|&s| pair.chunk(s)).collect();
    let masks: Vec<&[bool]> = slots.iter().map(|&s| pair.token_masks[s].as_slice()).collect();
    let cls = encode_chunks(w, cfg, &chunks, &masks)?;
    for (row, &s) in slots.iter().enumerate() {
        let (dst, r) = if s < plan.k_ctx {
            (&mut ctx, s)
        } else {
            (&mut resp, s - plan.k_ctx)
        };
        dst.data_mut()[r * d..(r + 1) * d].copy_from_slice(cls.row(row));
    }
    Ok((ctx, resp))
}

/// Tape-free forward of one unchunked sequence (full self-attention). Used
/// as the quadratic baseline for the chunking cost comparison.
pub fn encode_full_sequence(w: &EncoderWeights, cfg: &EncoderConfig, ids: &[u32]) -> Result<Tensor> {
    let mask = vec![true; ids.len()];
    encode_chunk(w, cfg, ids, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::{make_pair, ChunkPlan};
    use crate::nn::bind;
    use crate::tokenizer::{CLS, PAD};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(layers: usize) -> (EncoderConfig, EncoderWeights) {
        let cfg = EncoderConfig {
            layers,
            heads: 2,
            dim: 8,
            ffn_dim: 16,
            max_positions: 12,
            vocab_size: 30,
            dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = EncoderWeights::init(&cfg, &mut rng).unwrap();
        // Larger weights than the 0.02 init make masking effects visible.
        w.visit_mut(&mut |t| {
            if t.shape().len() == 2 {
                for v in t.data_mut() {
                    *v *= 20.0;
                }
            }
        });
        (cfg, w)
    }

    fn chunk(payload: &[u32], c: usize) -> (Vec<u32>, Vec<bool>) {
        let mut ids = vec![PAD; c];
        let mut mask = vec![false; c];
        ids[0] = CLS;
        mask[0] = true;
        for (i, &t) in payload.iter().enumerate() {
            ids[i + 1] = t;
            mask[i + 1] = true;
        }
        (ids, mask)
    }

    #[test]
    fn pad_positions_do_not_matter() {
        let (cfg, w) = tiny(2);
        let (mut ids, mask) = chunk(&[], 10);
        let a = encode_chunk(&w, &cfg, &ids, &mask).unwrap();
        for (i, t) in ids.iter_mut().enumerate().skip(1) {
            *t = 5 + i as u32;
        }
        let b = encode_chunk(&w, &cfg, &ids, &mask).unwrap();
        assert_eq!(a, b);
        // CLS alone
        let alone = encode_chunk(&w, &cfg, &[CLS], &[true]).unwrap();
        for (x, y) in a.data().iter().zip(alone.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_chunks_identical_outputs() {
        let (cfg, w) = tiny(2);
        let (ids, mask) = chunk(&[7, 8, 9], 10);
        let out = encode_chunks(&w, &cfg, &[&ids, &ids], &[&mask, &mask]).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(0), encode_chunk(&w, &cfg, &ids, &mask).unwrap().data());
    }

    #[test]
    fn out_of_range_token_is_an_error() {
        let (cfg, w) = tiny(1);
        let (mut ids, mask) = chunk(&[7], 6);
        ids[1] = 30;
        assert!(matches!(
            encode_chunk(&w, &cfg, &ids, &mask),
            Err(Error::TokenOutOfRange { id: 30, size: 30 })
        ));
    }

    #[test]
    fn taped_and_tape_free_paths_agree() {
        let (cfg, w) = tiny(2);
        let (a, am) = chunk(&[5, 6, 7, 8], 10);
        let (b, bm) = chunk(&[9, 10], 10);
        let fast = encode_chunks(&w, &cfg, &[&a, &b], &[&am, &bm]).unwrap();
        let mut tape = Tape::new();
        let p = bind(&mut tape, &w, false);
        let trace = encode_chunks_tape(&mut tape, &p, &cfg, &[&a, &b], &[&am, &bm], &mut Dropout::disabled()).unwrap();
        for (x, y) in tape.value(trace.cls).iter().zip(fast.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_unmasked_keys() {
        let (cfg, w) = tiny(1);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &w, false);
        let (ids, mask) = chunk(&[5, 6, 7], 10);
        let trace = encode_chunks_tape(&mut tape, &p, &cfg, &[&ids], &[&mask], &mut Dropout::disabled()).unwrap();
        let probs = tape.value(trace.attention[0]);
        for row in probs.chunks(10) {
            let s: f64 = row.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().zip(&mask).filter(|(_, &m)| !m).all(|(&v, _)| v == 0.0));
        }
    }

    #[test]
    fn encode_pair_zeroes_empty_chunks() {
        let cfg = EncoderConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            ffn_dim: 16,
            max_positions: 8,
            vocab_size: 30,
            dropout: 0.0,
        };
        let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let plan = ChunkPlan::new(8, 4, 2).unwrap();
        let ctx: Vec<u32> = (0..15).map(|i| 5 + i % 20).collect();
        let pair = make_pair(&ctx, &[9, 9, 9], &plan).unwrap();
        let (c, r) = encode_pair(&w, &cfg, &pair).unwrap();
        let nonzero = |t: &Tensor| (0..t.rows()).filter(|&i| t.row(i).iter().any(|&v| v != 0.0)).count();
        assert_eq!(nonzero(&c), 3);
        assert_eq!(nonzero(&r), 1);
        assert_eq!(r.row(0), encode_chunk(&w, &cfg, pair.chunk(4), &pair.token_masks[4]).unwrap().data());
    }

    #[test]
    fn config_validation() {
        let (mut cfg, _) = tiny(1);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 2;
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }
}
