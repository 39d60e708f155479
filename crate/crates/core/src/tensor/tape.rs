use std::borrow::Cow;

use super::{kernels, Mask, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    MulConst {
        x: Var,
        factors: Vec<f64>,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Rows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Reshape(Var),
    Slice {
        x: Var,
        offset: usize,
    },
    Sum(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node<'w> {
    shape: Vec<usize>,
    value: Cow<'w, [f64]>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every op's inputs precede it and
/// a single reverse sweep visits each node once. Leaves may borrow their data
/// (`'w`), which lets model weights go on the tape without copying.
#[derive(Default)]
pub struct Tape<'w> {
    nodes: Vec<Node<'w>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` when the loss never reached `var` or it does not require grad.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var) -> Option<Tensor> {
        let g = self.get(var)?;
        Tensor::new(self.shapes[var.0].clone(), g.to_vec()).ok()
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'w> Tape<'w> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        // Ops that nothing upstream needs gradients for are kept as plain leaves.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that owns its data.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(t.into_data()),
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that borrows `t` for the lifetime of the tape.
    pub fn leaf_ref(&mut self, t: &'w Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            [b, r, c] => Ok((*b, *r, *c)),
            s => Err(Error::shape(op, s, &[0, 0, 0])),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), tb, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, tb, m, k, n }, &[a, b]))
    }

    /// Batched product `a[B×m×k] · b[B×k×n]` (or `b[B×n×k]ᵀ` when `tb`).
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (batch, m, k) = self.dims3(a, "bmm")?;
        let (bb, br, bc) = self.dims3(b, "bmm")?;
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if batch != bb || k != kb {
            return Err(Error::shape("bmm", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let op = Op::BatchMatMul {
            a,
            b,
            tb,
            batch,
            m,
            k,
            n,
        };
        Ok(self.push(vec![batch, m, n], out, op, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[d]` (or `[1×d]`) bias to every row of `x[...×d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if numel(self.shape(bias)) != d {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).to_vec();
        kernels::add_bias(&mut out, self.value(bias));
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor }, &[x])
    }

    /// Elementwise product with constant factors (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != numel(self.shape(x)) {
            return Err(Error::shape("mul_const", self.shape(x), &[factors.len()]));
        }
        let out = self.value(x).iter().zip(&factors).map(|(v, f)| v * f).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst { x, factors }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis. Masked positions come out as exact zeros;
    /// a row with every position masked is an error.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        if let Some(m) = mask {
            if m.shape() != shape.as_slice() {
                return Err(Error::shape("softmax_rows", &shape, m.shape()));
            }
        }
        let mut out = vec![0.0; numel(&shape)];
        kernels::softmax_rows(self.value(x), cols, mask.map(Mask::keep), &mut out)?;
        Ok(self.push(shape, out, Op::Softmax { x, cols }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if numel(self.shape(gain)) != d || numel(self.shape(bias)) != d {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let mut out = vec![0.0; numel(&shape)];
        let (mean, rstd) = kernels::layer_norm(self.value(x), d, self.value(gain), self.value(bias), eps, &mut out);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        };
        Ok(self.push(shape, out, op, &[x, gain, bias]))
    }

    /// Gathers rows of a 2-D tensor (embedding lookup when `x` is a table).
    pub fn rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, d) = self.dims2(x, "rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape("rows", self.shape(x), &[bad]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let op = Op::Rows {
            x,
            index: index.to_vec(),
        };
        Ok(self.push(vec![index.len(), d], out, op, &[x]))
    }

    /// Places row `i` of `x` at output row `index[i]`; unlisted rows are zero.
    pub fn scatter_rows(&mut self, x: Var, index: &[usize], out_rows: usize) -> Result<Var> {
        let (r, d) = self.dims2(x, "scatter_rows")?;
        if r != index.len() || index.iter().any(|&i| i >= out_rows) {
            return Err(Error::shape("scatter_rows", self.shape(x), &[out_rows]));
        }
        let mut out = vec![0.0; out_rows * d];
        let src = self.value(x);
        for (k, &i) in index.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&src[k * d..(k + 1) * d]);
        }
        let op = Op::ScatterRows {
            x,
            index: index.to_vec(),
        };
        Ok(self.push(vec![out_rows, d], out, op, &[x]))
    }

    /// Stacks 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != d {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, d], out, Op::Concat(parts.to_vec()), parts))
    }

    /// `[B·T × H·dh]` → `[B·H × T × dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (r, d) = self.dims2(x, "split_heads")?;
        if r != batch * seq || d % heads != 0 {
            return Err(Error::shape("split_heads", self.shape(x), &[batch, seq, heads]));
        }
        let dh = d / heads;
        let src = self.value(x);
        let mut out = vec![0.0; r * d];
        for b in 0..batch {
            for t in 0..seq {
                let s = &src[(b * seq + t) * d..(b * seq + t + 1) * d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&s[h * dh..(h + 1) * dh]);
                }
            }
        }
        let op = Op::SplitHeads { x, batch, seq, heads };
        Ok(self.push(vec![batch * heads, seq, dh], out, op, &[x]))
    }

    /// Inverse of [`split_heads`](Self::split_heads).
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (bh, t, dh) = self.dims3(x, "merge_heads")?;
        if bh != batch * heads || t != seq {
            return Err(Error::shape("merge_heads", self.shape(x), &[batch, seq, heads]));
        }
        let d = heads * dh;
        let src = self.value(x);
        let mut out = vec![0.0; batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let s = ((b * heads + h) * seq + t) * dh;
                    let dst = (b * seq + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let op = Op::MergeHeads { x, batch, seq, heads };
        Ok(self.push(vec![batch * seq, d], out, op, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    /// Contiguous view `x.flat[offset .. offset + numel(shape)]` as `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len = numel(shape);
        if offset + len > self.value(x).len() {
            return Err(Error::shape("slice", self.shape(x), shape));
        }
        let out = self.value(x)[offset..offset + len].to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Slice { x, offset }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Mean binary cross-entropy of `logits` against `targets` in {0, 1}.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::LengthMismatch(z.len(), targets.len()));
        }
        let n = z.len() as f64;
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only report gradients where the caller asked for them.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, tb, m, k, n } => {
                if rg(a) {
                    // dA = dC · op(B)ᵀ
                    let ga = slot(grads, a, m * k);
                    kernels::gemm(m, n, k, g, false, self.value(b), !tb, ga, true);
                }
                if rg(b) {
                    let gb = slot(grads, b, k * n);
                    if tb {
                        // B is [n×k]: dB = dCᵀ · A
                        kernels::gemm(n, m, k, g, true, self.value(a), false, gb, true);
                    } else {
                        // dB = Aᵀ · dC
                        kernels::gemm(k, m, n, self.value(a), true, g, false, gb, true);
                    }
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                if rg(a) {
                    let ga = slot(grads, a, batch * m * k);
                    for s in 0..batch {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..(s + 1) * m * n],
                            false,
                            &bv[s * k * n..(s + 1) * k * n],
                            !tb,
                            &mut ga[s * m * k..(s + 1) * m * k],
                            true,
                        );
                    }
                }
                if rg(b) {
                    let gb = slot(grads, b, batch * k * n);
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let dst = &mut gb[s * k * n..(s + 1) * k * n];
                        if tb {
                            kernels::gemm(n, m, k, gs, true, as_, false, dst, true);
                        } else {
                            kernels::gemm(k, m, n, as_, true, gs, false, dst, true);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if rg(a) {
                    axpy(slot(grads, a, g.len()), 1.0, g);
                }
                if rg(b) {
                    axpy(slot(grads, b, g.len()), 1.0, g);
                }
            }
            &Op::Sub(a, b) => {
                if rg(a) {
                    axpy(slot(grads, a, g.len()), 1.0, g);
                }
                if rg(b) {
                    axpy(slot(grads, b, g.len()), -1.0, g);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if rg(a) {
                    let ga = slot(grads, a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if rg(b) {
                    let gb = slot(grads, b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if rg(x) {
                    axpy(slot(grads, x, g.len()), 1.0, g);
                }
                if rg(bias) {
                    let d = numel(self.shape(bias));
                    let gb = slot(grads, bias, d);
                    for row in g.chunks_exact(d) {
                        axpy(gb, 1.0, row);
                    }
                }
            }
            &Op::Scale { x, factor } => axpy(slot(grads, x, g.len()), factor, g),
            Op::MulConst { x, factors } => {
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * factors[j];
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                let gx = slot(grads, x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * kernels::gelu_grad(xv[j]);
                }
            }
            &Op::Softmax { x, cols } => {
                let y = &node.value;
                let gx = slot(grads, x, g.len());
                for ((yr, gr), dst) in y.chunks_exact(cols).zip(g.chunks_exact(cols)).zip(gx.chunks_exact_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dst[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let d = numel(self.shape(*gain));
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let rows = xv.len() / d;
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                let (mut dgain, mut dbias) = (vec![0.0; d], vec![0.0; d]);
                let mut dx = rg(*x).then(|| vec![0.0; xv.len()]);
                for r in 0..rows {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * gv[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                }
                if let Some(dx) = dx {
                    axpy(slot(grads, *x, dx.len()), 1.0, &dx);
                }
                if rg(*gain) {
                    axpy(slot(grads, *gain, d), 1.0, &dgain);
                }
                if rg(*bias) {
                    axpy(slot(grads, *bias, d), 1.0, &dbias);
                }
            }
            Op::Rows { x, index } => {
                let d = node.shape[1];
                let len = numel(self.shape(*x));
                let gx = slot(grads, *x, len);
                for (k, &i) in index.iter().enumerate() {
                    axpy(&mut gx[i * d..(i + 1) * d], 1.0, &g[k * d..(k + 1) * d]);
                }
            }
            Op::ScatterRows { x, index } => {
                let d = node.shape[1];
                let gx = slot(grads, *x, index.len() * d);
                for (k, &i) in index.iter().enumerate() {
                    axpy(&mut gx[k * d..(k + 1) * d], 1.0, &g[i * d..(i + 1) * d]);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = numel(self.shape(p));
                    if rg(p) {
                        axpy(slot(grads, p, len), 1.0, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            &Op::SplitHeads { x, batch, seq, heads } => {
                let dh = node.shape[2];
                let d = heads * dh;
                let gx = slot(grads, x, g.len());
                for b in 0..batch {
                    for t in 0..seq {
                        for h in 0..heads {
                            let src = ((b * heads + h) * seq + t) * dh;
                            let dst = (b * seq + t) * d + h * dh;
                            axpy(&mut gx[dst..dst + dh], 1.0, &g[src..src + dh]);
                        }
                    }
                }
            }
            &Op::MergeHeads { x, batch, seq, heads } => {
                let d = node.shape[1];
                let dh = d / heads;
                let gx = slot(grads, x, g.len());
                for b in 0..batch {
                    for h in 0..heads {
                        for t in 0..seq {
                            let dst = ((b * heads + h) * seq + t) * dh;
                            let src = (b * seq + t) * d + h * dh;
                            axpy(&mut gx[dst..dst + dh], 1.0, &g[src..src + dh]);
                        }
                    }
                }
            }
            &Op::Reshape(x) => axpy(slot(grads, x, g.len()), 1.0, g),
            &Op::Slice { x, offset } => {
                let len = numel(self.shape(x));
                let gx = slot(grads, x, len);
                axpy(&mut gx[offset..offset + g.len()], 1.0, g);
            }
            &Op::Sum(x) => {
                let len = numel(self.shape(x));
                for v in slot(grads, x, len).iter_mut() {
                    *v += g[0];
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let n = z.len() as f64;
                let gz = slot(grads, *logits, z.len());
                for j in 0..z.len() {
                    gz[j] += g[0] * (kernels::sigmoid(z[j]) - targets[j]) / n;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let p = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(p), &[1.0, 0.0, 0.0, 1.0]);

        let a = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(t2(&[vec![0.0], vec![1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[2.0, 4.0]);

        let z = tape.constant(Tensor::zeros([3, 4]));
        let any = tape.constant(Tensor::full([4, 2], 7.5));
        let zc = tape.matmul(z, any).unwrap();
        assert_eq!(tape.shape(zc), &[3, 2]);
        assert!(tape.value(zc).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 4], 0.3));
        let y = tape.softmax_rows(x, None).unwrap();
        assert!(tape.value(y).iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = tape.constant(t2(&[vec![0.0, 3f64.ln()]]));
        let y = tape.softmax_rows(x, None).unwrap();
        assert!((tape.value(y)[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(y)[1] - 0.75).abs() < 1e-15);

        let x = tape.constant(t2(&[vec![5.0, 5.0]]));
        let m = Mask::new([1, 2], vec![true, false]).unwrap();
        let y = tape.softmax_rows(x, Some(&m)).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 2]));
        let m = Mask::new([2, 2], vec![true, false, false, false]).unwrap();
        assert!(matches!(tape.softmax_rows(x, Some(&m)), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::zeros([2]));
        let x = tape.constant(t2(&[vec![1.0, -1.0], vec![4.0, 4.0]]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
        assert!(v[2].abs() < 1e-9 && v[3].abs() < 1e-9);

        let g0 = tape.constant(Tensor::zeros([2]));
        let bias = tape.constant(Tensor::new([2], vec![0.5, -2.0]).unwrap());
        let y = tape.layer_norm(x, g0, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn layer_norm_normalizes_random_rows() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform([16, 24], -3.0, 3.0, &mut rng));
        let g = tape.constant(Tensor::ones([24]));
        let b = tape.constant(Tensor::zeros([24]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.value(y).chunks(24) {
            let mean = row.iter().sum::<f64>() / 24.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([3], vec![0.3, -1.0, 2.0]).unwrap(), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.get(s).unwrap(), &[1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
        let untouched = tape.leaf(Tensor::ones([2]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
        assert!(g.get(untouched).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn split_and_merge_heads_are_inverse() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(Tensor::new([6, 4], data.clone()).unwrap());
        let s = tape.split_heads(x, 2, 3, 2).unwrap();
        assert_eq!(tape.shape(s), &[4, 3, 2]);
        // batch 0, head 1, token 0 = row 0 cols 2..4
        assert_eq!(&tape.value(s)[6..8], &[2.0, 3.0]);
        let m = tape.merge_heads(s, 2, 3, 2).unwrap();
        assert_eq!(tape.value(m), data.as_slice());
    }
}
