//! Forward/backward kernels for the Transformer building blocks.
//!
//! Activations are row-major `[rows x width]` buffers where a row is one
//! (sentence, position) slot of a padded batch.

use super::tensor::{axpy, dot, matmul, matmul_nt, matmul_tn, Scalar};
use crate::rng::{self, Rng};

pub const LN_EPS: f64 = 1e-6;

/// `y = x W + b` with `W` stored `[d_in x d_out]`.
pub fn linear_forward<F: Scalar>(x: &[F], rows: usize, w: &[F], b: &[F], d_in: usize, d_out: usize) -> Vec<F> {
    let mut y = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    matmul(x, w, &mut y, rows, d_in, d_out, true);
    y
}

/// Accumulates weight/bias gradients and returns `dx` when asked for.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Scalar>(
    x: &[F],
    dy: &[F],
    rows: usize,
    w: &[F],
    d_in: usize,
    d_out: usize,
    gw: &mut [F],
    gb: &mut [F],
    want_dx: bool,
) -> Option<Vec<F>> {
    matmul_tn(x, dy, gw, d_in, rows, d_out, true);
    for row in dy.chunks_exact(d_out) {
        axpy(F::ONE, row, gb);
    }
    want_dx.then(|| {
        let mut dx = vec![F::ZERO; rows * d_in];
        matmul_nt(dy, w, &mut dx, rows, d_out, d_in, false);
        dx
    })
}

pub struct LayerNormCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

pub fn layer_norm_forward<F: Scalar>(x: &[F], d: usize, gamma: &[F], beta: &[F]) -> (Vec<F>, LayerNormCache<F>) {
    let rows = x.len() / d;
    let inv_d = F::from_f64(1.0 / d as f64);
    let eps = F::from_f64(LN_EPS);
    let mut y = vec![F::ZERO; x.len()];
    let mut xhat = vec![F::ZERO; x.len()];
    let mut rstd = vec![F::ZERO; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (row[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gamma[i] + beta[i];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<F: Scalar>(
    cache: &LayerNormCache<F>,
    dy: &[F],
    d: usize,
    gamma: &[F],
    g_gamma: &mut [F],
    g_beta: &mut [F],
) -> Vec<F> {
    let rows = dy.len() / d;
    let inv_d = F::from_f64(1.0 / d as f64);
    let mut dx = vec![F::ZERO; dy.len()];
    let mut dxhat = vec![F::ZERO; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let (mut mean_dxhat, mut mean_dxhat_xhat) = (F::ZERO, F::ZERO);
        for i in 0..d {
            g_gamma[i] += dyr[i] * xh[i];
            g_beta[i] += dyr[i];
            dxhat[i] = dyr[i] * gamma[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] = rs * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Geometry of one attention call over a padded batch.
#[derive(Clone, Copy)]
pub struct AttnShape<'a> {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Valid query positions per sentence; rows past it produce zeros.
    pub q_lens: &'a [usize],
    /// Valid key positions per sentence.
    pub k_lens: &'a [usize],
    pub causal: bool,
}

impl AttnShape<'_> {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn key_limit(&self, b: usize, i: usize) -> usize {
        let k = self.k_lens[b];
        if self.causal {
            k.min(i + 1)
        } else {
            k
        }
    }
}

/// Scaled dot-product attention for every head. Returns the concatenated
/// head outputs `[batch*tq x width]` and the probabilities
/// `[batch x heads x tq x tk]` (zero outside the visible keys).
pub fn attention_forward<F: Scalar>(q: &[F], k: &[F], v: &[F], s: AttnShape<'_>) -> (Vec<F>, Vec<F>) {
    let d = s.width();
    let dh = s.head_dim;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut ctx = vec![F::ZERO; s.batch * s.tq * d];
    let mut probs = vec![F::ZERO; s.batch * s.heads * s.tq * s.tk];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..s.q_lens[b].min(s.tq) {
                let limit = s.key_limit(b, i);
                if limit == 0 {
                    continue;
                }
                let qi = &q[(b * s.tq + i) * d + off..][..dh];
                let p = &mut probs[((b * s.heads + h) * s.tq + i) * s.tk..][..s.tk];
                let mut max = F::NEG_INFINITY;
                for j in 0..limit {
                    let kj = &k[(b * s.tk + j) * d + off..][..dh];
                    let score = dot(qi, kj) * scale;
                    p[j] = score;
                    max = max.max(score);
                }
                let mut sum = F::ZERO;
                for pj in &mut p[..limit] {
                    *pj = (*pj - max).exp();
                    sum += *pj;
                }
                let inv = F::ONE / sum;
                let out = &mut ctx[(b * s.tq + i) * d + off..][..dh];
                for j in 0..limit {
                    p[j] *= inv;
                    let vj = &v[(b * s.tk + j) * d + off..][..dh];
                    axpy(p[j], vj, out);
                }
            }
        }
    }
    (ctx, probs)
}

/// Gradients of [`attention_forward`] with respect to q, k and v.
pub fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dctx: &[F],
    s: AttnShape<'_>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let d = s.width();
    let dh = s.head_dim;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![F::ZERO; q.len()];
    let mut dk = vec![F::ZERO; k.len()];
    let mut dv = vec![F::ZERO; v.len()];
    let mut dp = vec![F::ZERO; s.tk];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..s.q_lens[b].min(s.tq) {
                let limit = s.key_limit(b, i);
                if limit == 0 {
                    continue;
                }
                let p = &probs[((b * s.heads + h) * s.tq + i) * s.tk..][..s.tk];
                let doi = &dctx[(b * s.tq + i) * d + off..][..dh];
                let mut weighted = F::ZERO;
                for j in 0..limit {
                    let vj = &v[(b * s.tk + j) * d + off..][..dh];
                    dp[j] = dot(doi, vj);
                    weighted += dp[j] * p[j];
                    axpy(p[j], doi, &mut dv[(b * s.tk + j) * d + off..][..dh]);
                }
                let qi = &q[(b * s.tq + i) * d + off..][..dh];
                for j in 0..limit {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == F::ZERO {
                        continue;
                    }
                    let kj = &k[(b * s.tk + j) * d + off..][..dh];
                    axpy(ds, kj, &mut dq[(b * s.tq + i) * d + off..][..dh]);
                    axpy(ds, qi, &mut dk[(b * s.tk + j) * d + off..][..dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Inverted dropout: returns the mask (0 or 1/(1-p)) after applying it.
pub fn dropout_forward<F: Scalar>(x: &mut [F], p: f64, rng: Option<&mut Rng>) -> Option<Vec<F>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = F::from_f64(1.0 / (1.0 - p));
    let mask: Vec<F> = (0..x.len())
        .map(|_| if rng::unit_f64(rng) < p { F::ZERO } else { keep })
        .collect();
    for (xi, &m) in x.iter_mut().zip(&mask) {
        *xi *= m;
    }
    Some(mask)
}

pub fn dropout_backward<F: Scalar>(dy: &mut [F], mask: Option<&Vec<F>>) {
    if let Some(mask) = mask {
        for (g, &m) in dy.iter_mut().zip(mask) {
            *g *= m;
        }
    }
}

/// `table[pos][i]`: sin for even `i`, cos for odd `i`, wavelength base 10000.
pub fn sinusoidal_table<F: Scalar>(max_position: usize, d: usize) -> Vec<F> {
    let mut table = vec![F::ZERO; max_position * d];
    for pos in 0..max_position {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            table[pos * d + i] = F::from_f64(v);
        }
    }
    table
}
