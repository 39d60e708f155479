//! Fixed-length chunk decomposition of (context, response) token pairs.
//!
//! Each chunk is `[CLS] + payload + [PAD]…`, so a chunk of size `c` carries
//! `c − 1` payload tokens. Over-long inputs lose their tail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{CLS, PAD};

/// Maximum number of chunk slots a single aggregation layer accepts.
pub const MAX_AGGREGATED_CHUNKS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub chunk_size: usize,
    pub k_ctx: usize,
    pub k_resp: usize,
}

impl Default for ChunkPlan {
    /// 256-token chunks, 32 context + 8 response.
    fn default() -> Self {
        ChunkPlan {
            chunk_size: 256,
            k_ctx: 32,
            k_resp: 8,
        }
    }
}

impl ChunkPlan {
    pub fn new(chunk_size: usize, k_ctx: usize, k_resp: usize) -> Result<Self> {
        let plan = ChunkPlan {
            chunk_size,
            k_ctx,
            k_resp,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size < 4 {
            return Err(Error::Config(format!("chunk size {} < 4", self.chunk_size)));
        }
        if self.k_ctx == 0 || self.k_resp == 0 {
            return Err(Error::Config("chunk budgets must be at least 1".into()));
        }
        if self.k_ctx + self.k_resp > MAX_AGGREGATED_CHUNKS {
            return Err(Error::Config(format!(
                "k_ctx + k_resp = {} exceeds {MAX_AGGREGATED_CHUNKS}",
                self.k_ctx + self.k_resp
            )));
        }
        Ok(())
    }

    pub fn total_chunks(&self) -> usize {
        self.k_ctx + self.k_resp
    }

    pub fn payload(&self) -> usize {
        self.chunk_size - 1
    }
}

/// Output of [`chunk_tokens`]: exactly `max_chunks` chunk rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunks {
    pub ids: Vec<Vec<u32>>,
    pub token_masks: Vec<Vec<bool>>,
    pub used: usize,
}

/// Splits `tokens` greedily into `max_chunks` chunks of `c` slots.
/// Unused chunks are `[CLS]` followed by padding.
pub fn chunk_tokens(tokens: &[u32], c: usize, max_chunks: usize) -> Result<Chunks> {
    if c < 4 {
        return Err(Error::Config(format!("chunk size {c} < 4")));
    }
    let payload = c - 1;
    let kept = &tokens[..tokens.len().min(payload * max_chunks)];
    let mut ids = Vec::with_capacity(max_chunks);
    let mut token_masks = Vec::with_capacity(max_chunks);
    let mut pieces = kept.chunks(payload);
    for _ in 0..max_chunks {
        let mut chunk = vec![PAD; c];
        let mut mask = vec![false; c];
        chunk[0] = CLS;
        mask[0] = true;
        if let Some(piece) = pieces.next() {
            chunk[1..=piece.len()].copy_from_slice(piece);
            mask[1..=piece.len()].fill(true);
        }
        ids.push(chunk);
        token_masks.push(mask);
    }
    let used = kept.len().div_ceil(payload);
    Ok(Chunks {
        ids,
        token_masks,
        used,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkedPair {
    pub plan: ChunkPlan,
    pub ctx_chunks: Vec<Vec<u32>>,
    pub resp_chunks: Vec<Vec<u32>>,
    /// Context chunk masks followed by response chunk masks.
    pub token_masks: Vec<Vec<bool>>,
    /// Length `k_ctx + k_resp`; context slots first.
    pub chunk_mask: Vec<bool>,
}

impl ChunkedPair {
    /// Chunk `i` in slot order (context chunks, then response chunks).
    pub fn chunk(&self, i: usize) -> &[u32] {
        if i < self.plan.k_ctx {
            &self.ctx_chunks[i]
        } else {
            &self.resp_chunks[i - self.plan.k_ctx]
        }
    }

    /// Slot indices whose chunk holds real tokens.
    pub fn real_slots(&self) -> Vec<usize> {
        (0..self.chunk_mask.len()).filter(|&i| self.chunk_mask[i]).collect()
    }

    /// Payload tokens of one side, in order, without CLS or padding.
    pub fn payload_tokens(&self, response: bool) -> Vec<u32> {
        let (chunks, offset) = if response {
            (&self.resp_chunks, self.plan.k_ctx)
        } else {
            (&self.ctx_chunks, 0)
        };
        chunks
            .iter()
            .enumerate()
            .flat_map(|(i, ch)| {
                let mask = &self.token_masks[offset + i];
                ch.iter().zip(mask).skip(1).filter(|(_, &m)| m).map(|(&t, _)| t)
            })
            .collect()
    }
}

pub fn make_pair(context_ids: &[u32], response_ids: &[u32], plan: &ChunkPlan) -> Result<ChunkedPair> {
    plan.validate()?;
    if response_ids.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let ctx = chunk_tokens(context_ids, plan.chunk_size, plan.k_ctx)?;
    let resp = chunk_tokens(response_ids, plan.chunk_size, plan.k_resp)?;
    let chunk_mask = (0..plan.k_ctx)
        .map(|i| i < ctx.used)
        .chain((0..plan.k_resp).map(|i| i < resp.used))
        .collect();
    let mut token_masks = ctx.token_masks;
    token_masks.extend(resp.token_masks);
    Ok(ChunkedPair {
        plan: *plan,
        ctx_chunks: ctx.ids,
        resp_chunks: resp.ids,
        token_masks,
        chunk_mask,
    })
}
