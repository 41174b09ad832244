//! Forward and backward kernels on flat row-major buffers.
//!
//! These are shared by the autodiff tape, the frozen vision encoder and the
//! cached-attention decoding path.

use super::Real;

/// Strided matrix view used by [`gemm`]: `(data, row_stride, col_stride)`.
pub type View<'a, T> = (&'a [T], usize, usize);

fn max_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// `c = alpha·a·b + beta·c` for an `m×k` view `a` and a `k×n` view `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || max_index(m, k, a.1, a.2) < a.0.len(), "gemm: a out of bounds");
    assert!(k == 0 || max_index(k, n, b.1, b.2) < b.0.len(), "gemm: b out of bounds");
    assert!(max_index(m, n, rsc, csc) < c.len(), "gemm: c out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Row-major `[m×k]·[k×n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, T::one(), (a, k, 1), (b, n, 1), T::zero(), &mut c, n, 1);
    c
}

/// `aᵀ·b` for row-major `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, T::one(), (a, 1, m), (b, n, 1), T::zero(), &mut c, n, 1);
    c
}

/// `a·bᵀ` for row-major `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, T::one(), (a, k, 1), (b, 1, k), T::zero(), &mut c, n, 1);
    c
}

/// `y += x·W` for a single row `x` and row-major `W: [in×out]`.
pub fn vec_mat_acc<T: Real>(x: &[T], w: &[T], out: usize, y: &mut [T]) {
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        for (yj, &wj) in y.iter_mut().zip(row) {
            *yj += xi * wj;
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// In-place softmax over the middle axis of an `[outer × n × inner]` buffer,
/// with max subtraction.
pub fn softmax_axis<T: Real>(x: &mut [T], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                x[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                x[at(j)] = x[at(j)] / total;
            }
        }
    }
}

pub fn softmax_rows<T: Real>(x: &mut [T], cols: usize) {
    let rows = x.len() / cols;
    softmax_axis(x, rows, cols, 1);
}

/// Returns `(y, inv_rms)` with one `inv_rms` entry per row.
pub fn rms_norm<T: Real>(x: &[T], gamma: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    let dt = T::from_usize(d).unwrap();
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dt;
        let ir = (ms + eps).sqrt().recip();
        inv.push(ir);
        for ((yo, &xv), &g) in y[r * d..(r + 1) * d].iter_mut().zip(row).zip(gamma) {
            *yo = g * xv * ir;
        }
    }
    (y, inv)
}

/// Returns `(dx, dgamma)`.
pub fn rms_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    inv: &[T],
    dy: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut dx = vec![T::zero(); x.len()];
    let mut dg = vec![T::zero(); d];
    let dt = T::from_usize(d).unwrap();
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let ir = inv[r];
        let mut dot = T::zero();
        for c in 0..d {
            dot += gamma[c] * dyr[c] * xr[c];
            dg[c] += dyr[c] * xr[c] * ir;
        }
        let k = ir * ir * ir * dot / dt;
        for c in 0..d {
            dx[r * d + c] = ir * gamma[c] * dyr[c] - xr[c] * k;
        }
    }
    (dx, dg)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Rotates adjacent pairs `(2i, 2i+1)` of every head by `pos·base^(-2i/hd)`.
/// `inverse` rotates by the negated angle (the transpose, used in backward).
pub fn rope<T: Real>(
    x: &mut [T],
    positions: &[usize],
    heads: usize,
    hd: usize,
    base: f64,
    inverse: bool,
) {
    let width = heads * hd;
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-(2.0 * i as f64) / hd as f64))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let trig: Vec<(T, T)> = freqs
            .iter()
            .map(|f| {
                let ang = pos as f64 * f;
                let s = if inverse { -ang.sin() } else { ang.sin() };
                (T::lit(ang.cos()), T::lit(s))
            })
            .collect();
        let row = &mut x[r * width..(r + 1) * width];
        for h in 0..heads {
            for (i, &(cos, sin)) in trig.iter().enumerate() {
                let j = h * hd + 2 * i;
                let (a, b) = (row[j], row[j + 1]);
                row[j] = a * cos - b * sin;
                row[j + 1] = a * sin + b * cos;
            }
        }
    }
}

/// Layout of a fused multi-head attention call.
///
/// Q, K and V are `[batch·seq × heads·head_dim]`; row `b·seq + s` is position
/// `s` of sequence `b` and head `h` occupies columns `h·hd..(h+1)·hd`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl AttnShape {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// Scaled dot-product attention. Returns `(out, probs)` where `probs` is
/// `[batch × heads × seq × seq]` with exact zeros above the diagonal when
/// causal.
pub fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], s: AttnShape) -> (Vec<T>, Vec<T>) {
    let w = s.width();
    let n = s.seq;
    let hd = s.head_dim;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut out = vec![T::zero(); s.rows() * w];
    let mut probs = vec![T::zero(); s.batch * s.heads * n * n];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = b * n * w + h * hd;
            let p = &mut probs[(b * s.heads + h) * n * n..(b * s.heads + h + 1) * n * n];
            gemm(n, hd, n, scale, (&q[off..], w, 1), (&k[off..], 1, w), T::zero(), p, n, 1);
            for i in 0..n {
                let row = &mut p[i * n..(i + 1) * n];
                let visible = if s.causal { i + 1 } else { n };
                let mut max = T::neg_infinity();
                for &x in &row[..visible] {
                    max = max.max(x);
                }
                let mut total = T::zero();
                for x in &mut row[..visible] {
                    *x = (*x - max).exp();
                    total += *x;
                }
                for x in &mut row[..visible] {
                    *x = *x / total;
                }
                for x in &mut row[visible..] {
                    *x = T::zero();
                }
            }
            gemm(n, n, hd, T::one(), (p, n, 1), (&v[off..], w, 1), T::zero(), &mut out[off..], w, 1);
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    s: AttnShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let w = s.width();
    let n = s.seq;
    let hd = s.head_dim;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); n * n];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = b * n * w + h * hd;
            let p = &probs[(b * s.heads + h) * n * n..(b * s.heads + h + 1) * n * n];
            // dP = dO·Vᵀ
            gemm(n, hd, n, T::one(), (&dout[off..], w, 1), (&v[off..], 1, w), T::zero(), &mut ds, n, 1);
            // dV = Pᵀ·dO
            gemm(n, n, hd, T::one(), (p, 1, n), (&dout[off..], w, 1), T::zero(), &mut dv[off..], w, 1);
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let dr = &mut ds[i * n..(i + 1) * n];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot);
                }
            }
            gemm(n, n, hd, scale, (&ds, n, 1), (&k[off..], w, 1), T::zero(), &mut dq[off..], w, 1);
            gemm(n, n, hd, scale, (&ds, 1, n), (&q[off..], w, 1), T::zero(), &mut dk[off..], w, 1);
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_products_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 0.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.25 - 1.0).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|t| a[i * 3 + t] * b[t * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), c);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), c);
        let mut y = vec![0.0; 4];
        vec_mat_acc(&a[..3], &b, 4, &mut y);
        assert_eq!(y, c[..4].to_vec());
    }

    #[test]
    fn causal_probs_are_lower_triangular() {
        let s = AttnShape { batch: 1, seq: 4, heads: 1, head_dim: 2, causal: true };
        let q: Vec<f64> = (0..8).map(|v| v as f64 * 0.1).collect();
        let (_, p) = attention_forward(&q, &q, &q, s);
        for i in 0..4 {
            let total: f64 = p[i * 4..i * 4 + 4].iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for j in i + 1..4 {
                assert_eq!(p[i * 4 + j], 0.0);
            }
        }
    }
}
