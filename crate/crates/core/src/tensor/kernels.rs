//! Direct (tape-free) numeric kernels.
//!
//! These are the forward computations behind the tape operations, exposed
//! for inference paths and for callers that need plain values (teacher soft
//! targets, metrics, oracles in tests).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Tensor, TensorError};

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 16;
/// Depth of one pass over `k`, sized so a strip of `b` stays in L1.
const K_BLOCK: usize = 128;

/// `out[m,n] += a[m,k] · b[k,n]`, row-major.
///
/// Works on 4×8 output tiles held in registers across a block of `k`. Every
/// output element accumulates over `k` in order, starting from its current
/// value, so results do not depend on `m`, `n` or the blocking.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + K_BLOCK).min(k);
        // a[i, kk] lives at a[i * k + kk]; b[kk, j] at b[kk * n + j]
        tiled(
            m,
            n,
            k0,
            k1,
            out,
            |i, kk| a[i * k + kk],
            |kk, j| &b[kk * n + j..][..TILE_COLS],
            |kk, j| b[kk * n + j],
        );
        k0 = k1;
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`, summing over `m` in order.
pub fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if k == 0 || n == 0 {
        return;
    }
    let mut m0 = 0;
    while m0 < m {
        let m1 = (m0 + K_BLOCK).min(m);
        // output row r = column r of `a`; the summed index is the row of `a`
        tiled(
            k,
            n,
            m0,
            m1,
            out,
            |r, t| a[t * k + r],
            |t, j| &g[t * n + j..][..TILE_COLS],
            |t, j| g[t * n + j],
        );
        m0 = m1;
    }
}

/// Shared tile loop: `out[r, j] += Σ_{t in t0..t1} lhs(r, t) · rhs(t, j)`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tiled<'b, L, R, E>(rows: usize, n: usize, t0: usize, t1: usize, out: &mut [f64], lhs: L, rhs: R, rhs_elem: E)
where
    L: Fn(usize, usize) -> f64,
    R: Fn(usize, usize) -> &'b [f64],
    E: Fn(usize, usize) -> f64,
{
    let full_cols = n - n % TILE_COLS;
    let mut i = 0;
    while i < rows {
        let tile_rows = TILE_ROWS.min(rows - i);
        if tile_rows == TILE_ROWS {
            let mut j = 0;
            while j < full_cols {
                let mut acc = [[0.0f64; TILE_COLS]; TILE_ROWS];
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    acc_r.copy_from_slice(&out[(i + r) * n + j..][..TILE_COLS]);
                }
                for t in t0..t1 {
                    let bv: &[f64; TILE_COLS] = rhs(t, j).try_into().unwrap();
                    let av: [f64; TILE_ROWS] = core::array::from_fn(|r| lhs(i + r, t));
                    for r in 0..TILE_ROWS {
                        for c in 0..TILE_COLS {
                            acc[r][c] += av[r] * bv[c];
                        }
                    }
                }
                for (r, acc_r) in acc.iter().enumerate() {
                    out[(i + r) * n + j..][..TILE_COLS].copy_from_slice(acc_r);
                }
                j += TILE_COLS;
            }
        } else {
            for r in i..i + tile_rows {
                let mut j = 0;
                while j < full_cols {
                    let mut acc: [f64; TILE_COLS] = out[r * n + j..][..TILE_COLS].try_into().unwrap();
                    for t in t0..t1 {
                        let av = lhs(r, t);
                        let bv = rhs(t, j);
                        for c in 0..TILE_COLS {
                            acc[c] += av * bv[c];
                        }
                    }
                    out[r * n + j..][..TILE_COLS].copy_from_slice(&acc);
                    j += TILE_COLS;
                }
            }
        }
        for r in i..i + tile_rows {
            for j in full_cols..n {
                let mut s = out[r * n + j];
                for t in t0..t1 {
                    s += lhs(r, t) * rhs_elem(t, j);
                }
                out[r * n + j] = s;
            }
        }
        i += tile_rows;
    }
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

fn check_temperature(op: &'static str, temperature: f64) -> Result<(), TensorError> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(TensorError::domain(
            op,
            format!("temperature must be a positive finite number, got {temperature}"),
        ))
    }
}

/// Writes `softmax(z / temperature)` into `out`, subtracting the row max first.
pub fn softmax_row(z: &[f64], temperature: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &zi) in out.iter_mut().zip(z) {
        let e = libm::exp((zi - max) / temperature);
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `ln Σ exp(z)` with max subtraction.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&zi| libm::exp(zi - max)).sum();
    max + libm::log(s)
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_with_temperature(logits: &Tensor, temperature: f64) -> Result<Tensor, TensorError> {
    check_temperature("softmax", temperature)?;
    let (rows, cols) = logits.dims2()?;
    if cols < 2 {
        return Err(TensorError::dim("softmax", "need at least two classes"));
    }
    let mut out = vec![0.0; rows * cols];
    for (z, o) in logits.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        softmax_row(z, temperature, o);
    }
    Tensor::new(vec![rows, cols], out)
}

pub(crate) fn check_stochastic(op: &'static str, t: &Tensor, tol: f64) -> Result<(), TensorError> {
    let (_, cols) = t.dims2()?;
    for (i, row) in t.data().chunks_exact(cols).enumerate() {
        if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(TensorError::domain(op, format!("row {i} has entries outside [0, 1]")));
        }
        let s: f64 = row.iter().sum();
        if libm::fabs(s - 1.0) > tol {
            return Err(TensorError::domain(op, format!("row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Mean over rows of `Σ_j p_ij ln(p_ij / q_ij)`, with `0 · ln(0/q) = 0`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64, TensorError> {
    if p.shape() != q.shape() {
        return Err(TensorError::Shape {
            op: "kl_divergence",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let (rows, _) = p.dims2()?;
    check_stochastic("kl_divergence", p, 1e-9)?;
    check_stochastic("kl_divergence", q, 1e-9)?;
    let mut total = 0.0;
    for (idx, (&pi, &qi)) in p.data().iter().zip(q.data()).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(TensorError::domain(
                    "kl_divergence",
                    format!("q is zero where p is positive (flat index {idx}); divergence is infinite"),
                ));
            }
            total += pi * libm::log(pi / qi);
        }
    }
    Ok(total / rows as f64)
}

/// Mean over rows of `-ln softmax(logits_i)[label_i]`, via log-sum-exp.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64, TensorError> {
    let (rows, cols) = logits.dims2()?;
    check_labels(labels, rows, cols)?;
    let total: f64 = logits
        .data()
        .chunks_exact(cols)
        .zip(labels)
        .map(|(z, &y)| log_sum_exp(z) - z[y])
        .sum();
    Ok(total / rows as f64)
}

pub(crate) fn check_labels(labels: &[usize], rows: usize, cols: usize) -> Result<(), TensorError> {
    if labels.len() != rows {
        return Err(TensorError::Shape {
            op: "cross_entropy",
            lhs: vec![rows, cols],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
        return Err(TensorError::Index {
            op: "cross_entropy",
            index: bad,
            bound: cols,
        });
    }
    Ok(())
}

/// Shannon entropy (nats) of a probability row.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * libm::log(x)).sum::<f64>()
}

/// GPT-2 tanh approximation of GELU and its derivative.
pub(crate) fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(inner);
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
