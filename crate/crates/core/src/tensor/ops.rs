//! Slice-level kernels shared by the forward and backward passes.

use super::Real;

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `[m,k] x [k,n] -> [m,n]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != T::zero() {
                axpy(av, &b[kk * n..(kk + 1) * n], row);
            }
        }
    }
    out
}

pub(crate) fn transpose2<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Gradient of `a` in `a·b`, i.e. `g·bᵀ`.
pub(crate) fn matmul_grad_a<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose2(b, k, n);
    matmul(g, &bt, m, n, k)
}

/// Gradient of `b` in `a·b`, i.e. `aᵀ·g`.
pub(crate) fn matmul_grad_b<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != T::zero() {
                axpy(av, grow, &mut out[kk * n..(kk + 1) * n]);
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * x * (T::one() + t)
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Stable softmax over one row, writing zeros where `keep` is false.
/// Returns false when no entry is kept.
pub(crate) fn softmax_row<T: Real>(x: &[T], keep: Option<&[bool]>, out: &mut [T]) -> bool {
    let kept = |j: usize| keep.map_or(true, |k| k[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if kept(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return false;
    }
    let mut total = T::zero();
    for (j, o) in out.iter_mut().enumerate() {
        if kept(j) {
            let e = (x[j] - max).exp();
            *o = e;
            total += e;
        } else {
            *o = T::zero();
        }
    }
    let inv = T::one() / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
    true
}

pub(crate) struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    dim: usize,
    eps: T,
) -> (Vec<T>, LayerNormSaved<T>) {
    let rows = x.len() / dim;
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::from_f64(dim as f64);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..dim {
            let h = (row[j] - mean) * rs;
            xhat[r * dim + j] = h;
            out[r * dim + j] = gamma[j] * h + beta[j];
        }
    }
    (out, LayerNormSaved { xhat, rstd })
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layer_norm_backward<T: Real>(
    g: &[T],
    gamma: &[T],
    saved: &LayerNormSaved<T>,
    dim: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = g.len() / dim;
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); dim];
    let mut dbeta = vec![T::zero(); dim];
    let d = T::from_f64(dim as f64);
    let mut dxhat = vec![T::zero(); dim];
    for r in 0..rows {
        let gr = &g[r * dim..(r + 1) * dim];
        let hr = &saved.xhat[r * dim..(r + 1) * dim];
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for j in 0..dim {
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
            dxhat[j] = gr[j] * gamma[j];
            sum_dh += dxhat[j];
            sum_dh_h += dxhat[j] * hr[j];
        }
        let scale = saved.rstd[r] / d;
        for j in 0..dim {
            dx[r * dim + j] = scale * (d * dxhat[j] - sum_dh - hr[j] * sum_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}

/// Geometry of a fused multi-head scaled dot-product attention call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Returns (output [B,Lq,D], probabilities [B,H,Lq,Lk]) or the first
/// degenerate (batch, query) row.
pub(crate) fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    key_pad: Option<&[bool]>,
    d: AttnDims,
) -> std::result::Result<(Vec<T>, Vec<T>), usize> {
    let dh = d.head_dim();
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut out = vec![T::zero(); d.batch * d.lq * d.dim];
    let mut probs = vec![T::zero(); d.batch * d.heads * d.lq * d.lk];
    let mut scores = vec![T::zero(); d.lk];
    let mut keep = vec![true; d.lk];
    for b in 0..d.batch {
        if let Some(pad) = key_pad {
            for j in 0..d.lk {
                keep[j] = !pad[b * d.lk + j];
            }
        }
        for h in 0..d.heads {
            let off = h * dh;
            for i in 0..d.lq {
                let qrow = &q[(b * d.lq + i) * d.dim + off..][..dh];
                for j in 0..d.lk {
                    scores[j] = if keep[j] {
                        dot(qrow, &k[(b * d.lk + j) * d.dim + off..][..dh]) * scale
                    } else {
                        T::neg_infinity()
                    };
                }
                let p = &mut probs[((b * d.heads + h) * d.lq + i) * d.lk..][..d.lk];
                if !softmax_row(&scores, Some(&keep), p) {
                    return Err(b);
                }
                let orow = &mut out[(b * d.lq + i) * d.dim + off..][..dh];
                for j in 0..d.lk {
                    if p[j] != T::zero() {
                        axpy(p[j], &v[(b * d.lk + j) * d.dim + off..][..dh], orow);
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Returns (dq, dk, dv).
pub(crate) fn attention_backward<T: Real>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d.head_dim();
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); d.lk];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let off = h * dh;
            for i in 0..d.lq {
                let p = &probs[((b * d.heads + h) * d.lq + i) * d.lk..][..d.lk];
                let go = &g[(b * d.lq + i) * d.dim + off..][..dh];
                let mut weighted = T::zero();
                for j in 0..d.lk {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vrow_at = (b * d.lk + j) * d.dim + off;
                    dp[j] = dot(go, &v[vrow_at..][..dh]);
                    weighted += dp[j] * p[j];
                    axpy(p[j], go, &mut dv[vrow_at..][..dh]);
                }
                let q_at = (b * d.lq + i) * d.dim + off;
                for j in 0..d.lk {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let k_at = (b * d.lk + j) * d.dim + off;
                    axpy(ds, &k[k_at..][..dh], &mut dq[q_at..][..dh]);
                    axpy(ds, &q[q_at..][..dh], &mut dk[k_at..][..dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
pub(crate) fn softplus<T: Real>(z: T) -> T {
    // max(z,0) + ln(1 + e^{-|z|})
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
