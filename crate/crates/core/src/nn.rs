//! Parameter containers and layer building blocks shared by the encoder and
//! the chunk aggregator.
//!
//! Every container is generic over its leaf type: `Tensor` for stored
//! weights, `Var` once bound to a tape. [`ParamTree`] fixes a single
//! traversal order, which is also the checkpoint registry order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Mask, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

pub trait ParamTree {
    type Leaf;
    type Mapped<U>;

    fn map<'a, U>(&'a self, f: &mut dyn FnMut(&'a Self::Leaf) -> U) -> Self::Mapped<U>;
    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(&str, &'a Self::Leaf));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Self::Leaf));

    fn leaves(&self) -> Vec<&Self::Leaf> {
        let mut out = Vec::new();
        self.visit("", &mut |_, l| out.push(l));
        out
    }

    fn named_leaves(&self) -> Vec<(String, &Self::Leaf)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, l| out.push((n.to_string(), l)));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Binds every stored tensor to a borrowed tape leaf.
pub fn bind<'w, P>(tape: &mut Tape<'w>, params: &'w P, requires_grad: bool) -> P::Mapped<Var>
where
    P: ParamTree<Leaf = Tensor>,
{
    params.map(&mut |t| tape.leaf_ref(t, requires_grad))
}

pub fn num_parameters<P: ParamTree<Leaf = Tensor>>(params: &P) -> usize {
    params.leaves().iter().map(|t| t.len()).sum()
}

/// Affine map `x · weight + bias` with `weight: [in×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> ParamTree for Linear<T> {
    type Leaf = T;
    type Mapped<U> = Linear<U>;

    fn map<'a, U>(&'a self, f: &mut dyn FnMut(&'a T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(&str, &'a T)) {
        f(&join(name, "weight"), &self.weight);
        f(&join(name, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl Linear<Tensor> {
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::randn([inputs, outputs], INIT_STD, rng),
            bias: Tensor::zeros([outputs]),
        }
    }

    /// Tape-free forward over row-major `x` with `rows` rows.
    pub fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (k, n) = (self.weight.shape()[0], self.weight.shape()[1]);
        let mut out = vec![0.0; rows * n];
        crate::tensor::kernels::gemm(rows, k, n, x, false, self.weight.data(), false, &mut out, false);
        crate::tensor::kernels::add_bias(&mut out, self.bias.data());
        out
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_bias(y, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> ParamTree for Norm<T> {
    type Leaf = T;
    type Mapped<U> = Norm<U>;

    fn map<'a, U>(&'a self, f: &mut dyn FnMut(&'a T) -> U) -> Norm<U> {
        Norm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(&str, &'a T)) {
        f(&join(name, "gain"), &self.gain);
        f(&join(name, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

impl Norm<Tensor> {
    pub fn init(dim: usize) -> Self {
        Norm {
            gain: Tensor::ones([dim]),
            bias: Tensor::zeros([dim]),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        crate::tensor::kernels::layer_norm(x, self.gain.len(), self.gain.data(), self.bias.data(), LAYER_NORM_EPS, &mut out);
        out
    }
}

impl Norm<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, LAYER_NORM_EPS)
    }
}

/// Multi-head attention projections.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

impl<T> ParamTree for Attention<T> {
    type Leaf = T;
    type Mapped<U> = Attention<U>;

    fn map<'a, U>(&'a self, f: &mut dyn FnMut(&'a T) -> U) -> Attention<U> {
        Attention {
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.query.visit(&join(name, "query"), f);
        self.key.visit(&join(name, "key"), f);
        self.value.visit(&join(name, "value"), f);
        self.output.visit(&join(name, "output"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.output.visit_mut(f);
    }
}

impl Attention<Tensor> {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        Attention {
            query: Linear::init(dim, dim, rng),
            key: Linear::init(dim, dim, rng),
            value: Linear::init(dim, dim, rng),
            output: Linear::init(dim, dim, rng),
        }
    }
}

/// Shapes for one batched attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionShape {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
}

impl Attention<Var> {
    /// Scaled dot-product attention of `queries [B·Tq × d]` over
    /// `keys_values [B·Tk × d]`. `key_keep[b·Tk + j]` says whether key `j` of
    /// batch item `b` may be attended to. Returns the projected output and the
    /// attention probabilities `[B·H × Tq × Tk]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys_values: Var,
        shape: AttentionShape,
        key_keep: &[bool],
        dropout: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let AttentionShape {
            batch,
            q_len,
            kv_len,
            heads,
        } = shape;
        let d = tape.shape(queries)[1];
        let scale = 1.0 / ((d / heads) as f64).sqrt();

        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, keys_values)?;
        let v = self.value.forward(tape, keys_values)?;
        let q = tape.split_heads(q, batch, q_len, heads)?;
        let k = tape.split_heads(k, batch, kv_len, heads)?;
        let v = tape.split_heads(v, batch, kv_len, heads)?;

        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, scale);
        let mask = attention_mask(key_keep, batch, heads, q_len, kv_len)?;
        let probs = tape.softmax_rows(scores, Some(&mask))?;
        let dropped = dropout.apply(tape, probs)?;
        let ctx = tape.bmm(dropped, v, false)?;
        let ctx = tape.merge_heads(ctx, batch, q_len, heads)?;
        let out = self.output.forward(tape, ctx)?;
        Ok((out, probs))
    }
}

fn attention_mask(key_keep: &[bool], batch: usize, heads: usize, q_len: usize, kv_len: usize) -> Result<Mask> {
    let mut keep = Vec::with_capacity(batch * heads * q_len * kv_len);
    for b in 0..batch {
        let row = &key_keep[b * kv_len..(b + 1) * kv_len];
        for _ in 0..heads * q_len {
            keep.extend_from_slice(row);
        }
    }
    Mask::new([batch * heads, q_len, kv_len], keep)
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

impl<T> ParamTree for FeedForward<T> {
    type Leaf = T;
    type Mapped<U> = FeedForward<U>;

    fn map<'a, U>(&'a self, f: &mut dyn FnMut(&'a T) -> U) -> FeedForward<U> {
        FeedForward {
            up: self.up.map(f),
            down: self.down.map(f),
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(&str, &'a T)) {
        self.up.visit(&join(name, "up"), f);
        self.down.visit(&join(name, "down"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.up.visit_mut(f);
        self.down.visit_mut(f);
    }
}

impl FeedForward<Tensor> {
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::init(dim, hidden, rng),
            down: Linear::init(hidden, dim, rng),
        }
    }

    pub fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut h = self.up.apply(x, rows);
        for v in h.iter_mut() {
            *v = crate::tensor::kernels::gelu(*v);
        }
        self.down.apply(&h, rows)
    }
}

impl FeedForward<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Inverted dropout. A disabled instance is the identity.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        if rate <= 0.0 {
            return Self::disabled();
        }
        Dropout {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep_scale = 1.0 / (1.0 - self.rate);
        let n = tape.value(x).len();
        let factors = (0..n)
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep_scale })
            .collect();
        tape.mul_const(x, factors)
    }
}

/// How the aggregator turns slot vectors into one pooled vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// The transformed global-CLS slot.
    #[default]
    Cls,
    /// Mean over unmasked slots.
    Mean,
}
