//! Forward kernels shared by the tape and the tape-free inference path.
//!
//! Every routine works on row-major slices. Keeping one implementation of
//! each kernel is what lets the two paths agree to rounding.

use crate::error::{Error, Result};

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`).
///
/// `a` is stored as `[m×k]`, or as `[k×m]` when `ta`; likewise `b` is `[k×n]`
/// or `[n×k]` when `tb`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, c, n, accumulate);
}

/// Strided gemm used to address per-head column slices in place.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * rsc..i * rsc + n].fill(0.0);
            }
        }
        return;
    }
    let last_a = (m - 1) * rsa + (k - 1) * csa;
    let last_b = (k - 1) * rsb + (n - 1) * csb;
    let last_c = (m - 1) * rsc + (n - 1);
    assert!(last_a < a.len() && last_b < b.len() && last_c < c.len());
    // SAFETY: the asserts above bound every address the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Row-wise softmax over `cols`-wide rows, with optional keep-mask.
/// Masked entries are written as exact zeros.
pub fn softmax_rows(x: &[f64], cols: usize, keep: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    for (r, (row, dst)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let mask = keep.map(|k| &k[r * cols..(r + 1) * cols]);
        softmax_row(row, mask, dst).ok_or(Error::DegenerateRow { row: r })?;
    }
    Ok(())
}

fn softmax_row(row: &[f64], keep: Option<&[bool]>, out: &mut [f64]) -> Option<()> {
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let max = (0..row.len())
        .filter(|&j| kept(j))
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut sum = 0.0;
    for j in 0..row.len() {
        out[j] = if kept(j) {
            let e = (row[j] - max).exp();
            sum += e;
            e
        } else {
            0.0
        };
    }
    let inv = 1.0 / sum;
    for v in out.iter_mut() {
        *v *= inv;
    }
    Some(())
}

/// Layer norm over the last axis. Returns per-row `(mean, 1/std)` for reuse
/// by the backward pass.
pub fn layer_norm(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..cols {
            dst[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

// tanh-form GELU constants
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}
