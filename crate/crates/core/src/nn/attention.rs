//! Multi-head attention kernels over `[T, S, 3D]` query/key/value tensors.
//!
//! Token 0 of every phase is that phase's class token. Spatial attention lets
//! each token of phase `t` attend to all `S` tokens of phase `t`. Temporal
//! attention lets pixel token `(t, s)` attend to the class token of phase `t`
//! and to position `s` in every phase; class tokens attend to the class tokens
//! of all phases.
//!
//! Spatial attention is computed in row blocks and never materialises the
//! `S x S` matrix; the backward pass recomputes the probabilities from the
//! stored log-sum-exp.

use super::fastmath::{exp_nonpos, exp_shift, softmax_row};
use super::gemm::{gemm, Layout};
use super::graph::{Graph, Op, Var};
use super::tensor::Tensor;
use crate::exec::Exec;

const BLOCK: usize = 32;

#[derive(Clone, Copy, Debug)]
struct Dims {
    t: usize,
    s: usize,
    d: usize,
    heads: usize,
    hd: usize,
}

impl Dims {
    fn of(qkv: &Tensor, heads: usize) -> Self {
        let sh = qkv.shape();
        assert_eq!(sh.len(), 3, "qkv must be [T, S, 3D]");
        assert_eq!(sh[2] % 3, 0, "qkv feature size must be 3D");
        let d = sh[2] / 3;
        assert!(heads > 0 && d % heads == 0, "embedding {d} not divisible by {heads} heads");
        Self { t: sh[0], s: sh[1], d, heads, hd: d / heads }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.hd as f64).sqrt()
    }

    fn lse_index(&self, t: usize, h: usize, s: usize) -> usize {
        (t * self.heads + h) * self.s + s
    }
}

impl Graph {
    /// Spatial self-attention; returns the concatenated head outputs `[T, S, D]`.
    pub fn spatial_attention(&mut self, qkv: Var, heads: usize) -> Var {
        let (out, lse) = spatial_forward(self.value(qkv), heads, self.exec());
        self.push(out, Op::SpatialAttention { qkv, heads, lse }, &[qkv])
    }

    /// Temporal attention; returns the concatenated head outputs `[T, S, D]`.
    pub fn temporal_attention(&mut self, qkv: Var, heads: usize) -> Var {
        let (out, lse) = temporal_forward(self.value(qkv), heads);
        self.push(out, Op::TemporalAttention { qkv, heads, lse }, &[qkv])
    }
}

/// Scaled logits of query rows `r0..r0+b` against every key of phase `t`, head `h`.
fn block_logits(qkv: &[f64], dm: Dims, t: usize, h: usize, r0: usize, b: usize, logits: &mut [f64]) {
    let w = 3 * dm.d;
    let base = t * dm.s * w + h * dm.hd;
    gemm(
        b,
        dm.hd,
        dm.s,
        dm.scale(),
        &qkv[base + r0 * w..],
        Layout::strided(w),
        &qkv[base + dm.d..],
        Layout::transposed(w),
        0.0,
        logits,
        Layout::row_major(dm.s),
    );
}

fn spatial_phase_forward(qkv: &[f64], dm: Dims, t: usize) -> (Vec<f64>, Vec<f64>) {
    let w = 3 * dm.d;
    let mut out = vec![0.0; dm.s * dm.d];
    let mut lse = vec![0.0; dm.heads * dm.s];
    let mut logits = vec![0.0; BLOCK * dm.s];
    for h in 0..dm.heads {
        let vbase = t * dm.s * w + 2 * dm.d + h * dm.hd;
        for r0 in (0..dm.s).step_by(BLOCK) {
            let b = BLOCK.min(dm.s - r0);
            block_logits(qkv, dm, t, h, r0, b, &mut logits);
            for (i, row) in logits[..b * dm.s].chunks_exact_mut(dm.s).enumerate() {
                lse[h * dm.s + r0 + i] = softmax_row(row);
            }
            gemm(
                b,
                dm.s,
                dm.hd,
                1.0,
                &logits,
                Layout::row_major(dm.s),
                &qkv[vbase..],
                Layout::strided(w),
                0.0,
                &mut out[r0 * dm.d + h * dm.hd..],
                Layout::strided(dm.d),
            );
        }
    }
    (out, lse)
}

pub(crate) fn spatial_forward(qkv: &Tensor, heads: usize, exec: Exec) -> (Tensor, Vec<f64>) {
    let dm = Dims::of(qkv, heads);
    let parts = exec.map_range(dm.t, |t| spatial_phase_forward(qkv.data(), dm, t));
    let mut out = Vec::with_capacity(dm.t * dm.s * dm.d);
    let mut lse = Vec::with_capacity(dm.t * dm.heads * dm.s);
    for (o, l) in parts {
        out.extend_from_slice(&o);
        lse.extend_from_slice(&l);
    }
    (Tensor::new([dm.t, dm.s, dm.d], out), lse)
}

fn spatial_phase_backward(qkv: &[f64], out: &[f64], lse: &[f64], gout: &[f64], dm: Dims, t: usize) -> Vec<f64> {
    let w = 3 * dm.d;
    let qbase = t * dm.s * w;
    let obase = t * dm.s * dm.d;
    let mut g = vec![0.0; dm.s * w];
    let mut p = vec![0.0; BLOCK * dm.s];
    let mut dp = vec![0.0; BLOCK * dm.s];
    for h in 0..dm.heads {
        let c0 = h * dm.hd;
        for r0 in (0..dm.s).step_by(BLOCK) {
            let b = BLOCK.min(dm.s - r0);
            block_logits(qkv, dm, t, h, r0, b, &mut p);
            for (i, row) in p[..b * dm.s].chunks_exact_mut(dm.s).enumerate() {
                exp_shift(row, lse[dm.lse_index(t, h, r0 + i)]);
            }
            let go = &gout[obase + r0 * dm.d + c0..];
            // gV += P^T dO
            gemm(
                dm.s,
                b,
                dm.hd,
                1.0,
                &p,
                Layout::transposed(dm.s),
                go,
                Layout::strided(dm.d),
                1.0,
                &mut g[2 * dm.d + c0..],
                Layout::strided(w),
            );
            // dP = dO V^T
            gemm(
                b,
                dm.hd,
                dm.s,
                1.0,
                go,
                Layout::strided(dm.d),
                &qkv[qbase + 2 * dm.d + c0..],
                Layout::transposed(w),
                0.0,
                &mut dp,
                Layout::row_major(dm.s),
            );
            let scale = dm.scale();
            for i in 0..b {
                let r = obase + (r0 + i) * dm.d + c0;
                let delta: f64 = (0..dm.hd).map(|c| gout[r + c] * out[r + c]).sum();
                let (pr, dr) = (&p[i * dm.s..(i + 1) * dm.s], &mut dp[i * dm.s..(i + 1) * dm.s]);
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = scale * pv * (*d - delta);
                }
            }
            // dQ = dS K ; dK += dS^T Q
            gemm(
                b,
                dm.s,
                dm.hd,
                1.0,
                &dp,
                Layout::row_major(dm.s),
                &qkv[qbase + dm.d + c0..],
                Layout::strided(w),
                0.0,
                &mut g[r0 * w + c0..],
                Layout::strided(w),
            );
            gemm(
                dm.s,
                b,
                dm.hd,
                1.0,
                &dp,
                Layout::transposed(dm.s),
                &qkv[qbase + r0 * w + c0..],
                Layout::strided(w),
                1.0,
                &mut g[dm.d + c0..],
                Layout::strided(w),
            );
        }
    }
    g
}

pub(crate) fn spatial_backward(
    qkv: &Tensor,
    out: &Tensor,
    lse: &[f64],
    gout: &Tensor,
    heads: usize,
    exec: Exec,
) -> Tensor {
    let dm = Dims::of(qkv, heads);
    let parts = exec.map_range(dm.t, |t| spatial_phase_backward(qkv.data(), out.data(), lse, gout.data(), dm, t));
    Tensor::new(qkv.shape(), parts.concat())
}

/// Rows (in `[T * S]` token numbering) that token `(t, s)` attends to in time.
fn temporal_keys(t: usize, s: usize, dm: Dims, keys: &mut Vec<usize>) {
    keys.clear();
    if s == 0 {
        keys.extend((0..dm.t).map(|u| u * dm.s));
    } else {
        keys.push(t * dm.s);
        keys.extend((0..dm.t).map(|u| u * dm.s + s));
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn temporal_forward(qkv: &Tensor, heads: usize) -> (Tensor, Vec<f64>) {
    let dm = Dims::of(qkv, heads);
    let (w, q) = (3 * dm.d, qkv.data());
    let mut out = vec![0.0; dm.t * dm.s * dm.d];
    let mut lse = vec![0.0; dm.t * dm.heads * dm.s];
    let mut keys = Vec::with_capacity(dm.t + 1);
    let mut p = Vec::with_capacity(dm.t + 1);
    for t in 0..dm.t {
        for s in 0..dm.s {
            temporal_keys(t, s, dm, &mut keys);
            let row = t * dm.s + s;
            for h in 0..dm.heads {
                let c0 = h * dm.hd;
                let qv = &q[row * w + c0..row * w + c0 + dm.hd];
                p.clear();
                p.extend(keys.iter().map(|&k| dm.scale() * dot(qv, &q[k * w + dm.d + c0..k * w + dm.d + c0 + dm.hd])));
                lse[dm.lse_index(t, h, s)] = softmax_row(&mut p);
                let o = &mut out[row * dm.d + c0..row * dm.d + c0 + dm.hd];
                for (&k, &pv) in keys.iter().zip(&p) {
                    let v = &q[k * w + 2 * dm.d + c0..k * w + 2 * dm.d + c0 + dm.hd];
                    for (oo, vv) in o.iter_mut().zip(v) {
                        *oo += pv * vv;
                    }
                }
            }
        }
    }
    (Tensor::new([dm.t, dm.s, dm.d], out), lse)
}

pub(crate) fn temporal_backward(qkv: &Tensor, out: &Tensor, lse: &[f64], gout: &Tensor, heads: usize) -> Tensor {
    let dm = Dims::of(qkv, heads);
    let (w, q, o, go) = (3 * dm.d, qkv.data(), out.data(), gout.data());
    let mut g = vec![0.0; q.len()];
    let mut keys = Vec::with_capacity(dm.t + 1);
    for t in 0..dm.t {
        for s in 0..dm.s {
            temporal_keys(t, s, dm, &mut keys);
            let row = t * dm.s + s;
            for h in 0..dm.heads {
                let c0 = h * dm.hd;
                let l = lse[dm.lse_index(t, h, s)];
                let qr = row * w + c0;
                let orow = row * dm.d + c0;
                let gor = &go[orow..orow + dm.hd];
                let delta = dot(gor, &o[orow..orow + dm.hd]);
                for &k in &keys {
                    let kr = k * w + dm.d + c0;
                    let vr = k * w + 2 * dm.d + c0;
                    let pv = exp_nonpos(dm.scale() * dot(&q[qr..qr + dm.hd], &q[kr..kr + dm.hd]) - l);
                    let ds = dm.scale() * pv * (dot(gor, &q[vr..vr + dm.hd]) - delta);
                    for c in 0..dm.hd {
                        g[vr + c] += pv * gor[c];
                        g[qr + c] += ds * q[kr + c];
                        g[kr + c] += ds * q[qr + c];
                    }
                }
            }
        }
    }
    Tensor::new(qkv.shape(), g)
}

/// Calls `f(t, head, query, weights)` with the spatial attention distribution of every query.
pub fn for_each_spatial_row(qkv: &Tensor, heads: usize, mut f: impl FnMut(usize, usize, usize, &[f64])) {
    let dm = Dims::of(qkv, heads);
    let mut logits = vec![0.0; BLOCK * dm.s];
    for t in 0..dm.t {
        for h in 0..dm.heads {
            for r0 in (0..dm.s).step_by(BLOCK) {
                let b = BLOCK.min(dm.s - r0);
                block_logits(qkv.data(), dm, t, h, r0, b, &mut logits);
                for (i, row) in logits[..b * dm.s].chunks_exact_mut(dm.s).enumerate() {
                    softmax_row(row);
                    f(t, h, r0 + i, row);
                }
            }
        }
    }
}

/// Calls `f(t, head, token, weights)` with the temporal attention distribution of every query.
///
/// For a pixel token the first weight belongs to the phase's class token and
/// the rest to the same position in phases `0..T`.
pub fn for_each_temporal_row(qkv: &Tensor, heads: usize, mut f: impl FnMut(usize, usize, usize, &[f64])) {
    let dm = Dims::of(qkv, heads);
    let (w, q) = (3 * dm.d, qkv.data());
    let mut keys = Vec::new();
    let mut p = Vec::new();
    for t in 0..dm.t {
        for s in 0..dm.s {
            temporal_keys(t, s, dm, &mut keys);
            let row = t * dm.s + s;
            for h in 0..dm.heads {
                let c0 = h * dm.hd;
                let qv = &q[row * w + c0..row * w + c0 + dm.hd];
                p.clear();
                p.extend(keys.iter().map(|&k| dm.scale() * dot(qv, &q[k * w + dm.d + c0..k * w + dm.d + c0 + dm.hd])));
                softmax_row(&mut p);
                f(t, h, s, &p);
            }
        }
    }
}
