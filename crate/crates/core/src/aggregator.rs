//! Attention over chunk-level CLS vectors, pooled into one hallucination
//! logit.
//!
//! Slot layout is `[globalCLS, ctx_0 … ctx_{k_ctx−1}, SEP, resp_0 …]`. Each
//! slot gets a learned position embedding and a segment embedding
//! (context, response or special) before a single post-norm attention block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chunker::ChunkPlan;
use crate::data::Label;
use crate::error::{Error, Result};
use crate::nn::{self, join, Attention, AttentionShape, Dropout, FeedForward, Linear, Norm, ParamTree, Pooling};
use crate::tensor::{kernels, Tape, Tensor, Var};

pub const SEGMENT_CONTEXT: usize = 0;
pub const SEGMENT_RESPONSE: usize = 1;
pub const SEGMENT_SPECIAL: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub heads: usize,
    #[serde(default)]
    pub pooling: Pooling,
    /// Adds a feed-forward sublayer after the attention block.
    #[serde(default)]
    pub ffn: bool,
    #[serde(default = "default_ffn_dim")]
    pub ffn_dim: usize,
}

fn default_ffn_dim() -> usize {
    128
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            heads: 4,
            pooling: Pooling::Cls,
            ffn: false,
            ffn_dim: default_ffn_dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorParams<T> {
    pub global_cls: T,
    pub sep: T,
    /// `[(k_ctx + k_resp + 2) × d]`
    pub slot_position: T,
    /// `[3 × d]`: context, response, special.
    pub segment: T,
    pub attention: Attention<T>,
    pub norm: Norm<T>,
    pub ffn: Option<(FeedForward<T>, Norm<T>)>,
    /// `[d × 1]` weight and `[1]` bias.
    pub head: Linear<T>,
}

pub type AggregatorWeights = AggregatorParams<Tensor>;

impl<T> ParamTree for AggregatorParams<T> {
    type Leaf = T;
    type Mapped<U> = AggregatorParams<U>;

    fn map<'a, U>(&'a self, f: &mut dyn FnMut(&'a T) -> U) -> AggregatorParams<U> {
        AggregatorParams {
            global_cls: f(&self.global_cls),
            sep: f(&self.sep),
            slot_position: f(&self.slot_position),
            segment: f(&self.segment),
            attention: self.attention.map(f),
            norm: self.norm.map(f),
            ffn: self.ffn.as_ref().map(|(ff, n)| (ff.map(f), n.map(f))),
            head: self.head.map(f),
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(&str, &'a T)) {
        f(&join(name, "global_cls"), &self.global_cls);
        f(&join(name, "sep"), &self.sep);
        f(&join(name, "slot_position"), &self.slot_position);
        f(&join(name, "segment"), &self.segment);
        self.attention.visit(&join(name, "attention"), f);
        self.norm.visit(&join(name, "norm"), f);
        if let Some((ff, n)) = &self.ffn {
            ff.visit(&join(name, "ffn"), f);
            n.visit(&join(name, "ffn_norm"), f);
        }
        self.head.visit(&join(name, "head"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.global_cls);
        f(&mut self.sep);
        f(&mut self.slot_position);
        f(&mut self.segment);
        self.attention.visit_mut(f);
        self.norm.visit_mut(f);
        if let Some((ff, n)) = &mut self.ffn {
            ff.visit_mut(f);
            n.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

impl AggregatorWeights {
    pub fn init(cfg: &AggregatorConfig, dim: usize, plan: &ChunkPlan, rng: &mut impl Rng) -> Result<Self> {
        if cfg.heads == 0 || !dim.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {} heads", cfg.heads)));
        }
        plan.validate()?;
        let slots = plan.total_chunks() + 2;
        Ok(AggregatorParams {
            global_cls: Tensor::randn([dim], nn::INIT_STD, rng),
            sep: Tensor::randn([dim], nn::INIT_STD, rng),
            slot_position: Tensor::randn([slots, dim], nn::INIT_STD, rng),
            segment: Tensor::randn([3, dim], nn::INIT_STD, rng),
            attention: Attention::init(dim, rng),
            norm: Norm::init(dim),
            ffn: cfg
                .ffn
                .then(|| (FeedForward::init(dim, cfg.ffn_dim, rng), Norm::init(dim))),
            head: Linear::init(dim, 1, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.global_cls.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationOutput {
    pub logit: f64,
    pub probability: f64,
    /// Head-averaged `[(k+2) × (k+2)]` attention probabilities.
    pub attention: Tensor,
}

/// Slot-level key mask: global CLS and SEP are always kept.
pub fn slot_keep(chunk_mask: &[bool], k_ctx: usize) -> Vec<bool> {
    let mut keep = Vec::with_capacity(chunk_mask.len() + 2);
    keep.push(true);
    keep.extend_from_slice(&chunk_mask[..k_ctx]);
    keep.push(true);
    keep.extend_from_slice(&chunk_mask[k_ctx..]);
    keep
}

fn segments(k_ctx: usize, k_resp: usize) -> Vec<usize> {
    let mut seg = vec![SEGMENT_SPECIAL];
    seg.extend(std::iter::repeat_n(SEGMENT_CONTEXT, k_ctx));
    seg.push(SEGMENT_SPECIAL);
    seg.extend(std::iter::repeat_n(SEGMENT_RESPONSE, k_resp));
    seg
}

pub struct AggregatorTrace {
    /// `[1]`
    pub logit: Var,
    /// `[H × (k+2) × (k+2)]`
    pub attention: Var,
}

/// Taped aggregation of `ctx [k_ctx × d]` and `resp [k_resp × d]`.
pub fn aggregate_tape(
    tape: &mut Tape,
    p: &AggregatorParams<Var>,
    cfg: &AggregatorConfig,
    ctx: Var,
    resp: Var,
    chunk_mask: &[bool],
    dropout: &mut Dropout,
) -> Result<AggregatorTrace> {
    let (k_ctx, d) = (tape.shape(ctx)[0], tape.shape(ctx)[1]);
    let k_resp = tape.shape(resp)[0];
    let dp = tape.shape(p.global_cls)[0];
    if tape.shape(ctx).len() != 2 || tape.shape(resp).len() != 2 || tape.shape(resp)[1] != d || d != dp {
        return Err(Error::shape("aggregate", tape.shape(ctx), tape.shape(resp)));
    }
    let slots = k_ctx + k_resp + 2;
    if chunk_mask.len() != k_ctx + k_resp || tape.shape(p.slot_position)[0] != slots {
        return Err(Error::LengthMismatch(chunk_mask.len() + 2, tape.shape(p.slot_position)[0]));
    }
    if !chunk_mask.iter().any(|&m| m) {
        return Err(Error::AllChunksMasked);
    }

    let cls = tape.reshape(p.global_cls, &[1, d])?;
    let sep = tape.reshape(p.sep, &[1, d])?;
    let x = tape.concat_rows(&[cls, ctx, sep, resp])?;
    let x = tape.add(x, p.slot_position)?;
    let seg = tape.rows(p.segment, &segments(k_ctx, k_resp))?;
    let x = tape.add(x, seg)?;

    let keep = slot_keep(chunk_mask, k_ctx);
    let shape = AttentionShape {
        batch: 1,
        q_len: slots,
        kv_len: slots,
        heads: cfg.heads,
    };
    let (a, probs) = p.attention.forward(tape, x, x, shape, &keep, dropout)?;
    let a = dropout.apply(tape, a)?;
    let sum = tape.add(x, a)?;
    let mut x = p.norm.forward(tape, sum)?;
    if let Some((ff, norm)) = &p.ffn {
        let f = ff.forward(tape, x)?;
        let f = dropout.apply(tape, f)?;
        let sum = tape.add(x, f)?;
        x = norm.forward(tape, sum)?;
    }

    let pooled = match cfg.pooling {
        Pooling::Cls => tape.rows(x, &[0])?,
        Pooling::Mean => {
            let kept: Vec<usize> = (0..slots).filter(|&i| keep[i]).collect();
            let w = 1.0 / kept.len() as f64;
            let picked = tape.rows(x, &kept)?;
            let weights = tape.constant(Tensor::full([1, kept.len()], w));
            tape.matmul(weights, picked)?
        }
    };
    let logit = p.head.forward(tape, pooled)?;
    let logit = tape.reshape(logit, &[1])?;
    Ok(AggregatorTrace { logit, attention: probs })
}

/// Mean over heads of `[H × S × S]` probabilities.
pub fn average_heads(probs: &[f64], heads: usize, slots: usize) -> Result<Tensor> {
    let mut out = vec![0.0; slots * slots];
    for h in probs.chunks_exact(slots * slots) {
        for (o, v) in out.iter_mut().zip(h) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= heads as f64;
    }
    Tensor::new([slots, slots], out)
}

/// Inference-mode aggregation (dropout off).
pub fn aggregate(
    w: &AggregatorWeights,
    cfg: &AggregatorConfig,
    ctx_reps: &Tensor,
    resp_reps: &Tensor,
    chunk_mask: &[bool],
) -> Result<AggregationOutput> {
    let mut tape = Tape::new();
    let p = nn::bind(&mut tape, w, false);
    let ctx = tape.leaf_ref(ctx_reps, false);
    let resp = tape.leaf_ref(resp_reps, false);
    let trace = aggregate_tape(&mut tape, &p, cfg, ctx, resp, chunk_mask, &mut Dropout::disabled())?;
    let logit = tape.value(trace.logit)[0];
    let slots = chunk_mask.len() + 2;
    Ok(AggregationOutput {
        logit,
        probability: kernels::sigmoid(logit),
        attention: average_heads(tape.value(trace.attention), cfg.heads, slots)?,
    })
}

/// Hallucinated iff `probability ≥ threshold`.
pub fn predict(probability: f64, threshold: f64) -> Label {
    if probability >= threshold {
        Label::Hallucinated
    } else {
        Label::Faithful
    }
}
