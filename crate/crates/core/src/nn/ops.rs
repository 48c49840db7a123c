//! Dense, structural and loss operations on the tape.

use super::gemm::{gemm, Layout};
use super::graph::{Graph, Op, Var};
use super::tensor::Tensor;
use crate::objective::{self, CubeDims};
use crate::Result;

fn trailing(shape: &[usize], from: usize) -> usize {
    shape[from..].iter().product()
}

impl Graph {
    /// `x W + b` over the last axis: `x [.., in]`, `W [in, out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let inn = *xs.last().expect("linear on a scalar");
        assert_eq!(ws.len(), 2, "linear weight must be 2-d");
        assert_eq!(ws[0], inn, "linear weight expects {} inputs, got {inn}", ws[0]);
        let out = ws[1];
        let rows = self.value(x).len() / inn;
        let mut y = vec![0.0; rows * out];
        let beta = match b {
            Some(b) => {
                let bias = self.value(b).data();
                assert_eq!(bias.len(), out);
                for r in y.chunks_exact_mut(out) {
                    r.copy_from_slice(bias);
                }
                1.0
            }
            None => 0.0,
        };
        gemm(
            rows,
            inn,
            out,
            1.0,
            self.value(x).data(),
            Layout::row_major(inn),
            self.value(w).data(),
            Layout::row_major(out),
            beta,
            &mut y,
            Layout::row_major(out),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(shape, y), Op::Linear { x, w, b }, &parents)
    }

    /// Non-overlapping `p x p` patches: `[T, C, H, W] -> [T, (H/p)(W/p), C p p]`, row-major patch order.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % patch == 0 && w % patch == 0, "patch size must divide the image");
        let (hp, wp) = (h / patch, w / patch);
        let feat = c * patch * patch;
        let xd = self.value(x).data();
        let mut out = vec![0.0; t * hp * wp * feat];
        for ti in 0..t {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let tok = (y / patch) * wp + xx / patch;
                        let f = (ci * patch + y % patch) * patch + xx % patch;
                        out[(ti * hp * wp + tok) * feat + f] = xd[((ti * c + ci) * h + y) * w + xx];
                    }
                }
            }
        }
        self.push(Tensor::new([t, hp * wp, feat], out), Op::Patchify { x, patch }, &[x])
    }

    /// `[T, n, D]` tokens and `[T, D]` class tokens to `[T, 1 + n, D]`.
    pub fn prepend_cls(&mut self, tokens: Var, cls: Var) -> Var {
        let s = self.shape(tokens).to_vec();
        let (t, n, d) = (s[0], s[1], s[2]);
        assert_eq!(self.shape(cls), &[t, d], "class tokens must be [T, D]");
        let (td, cd) = (self.value(tokens).data(), self.value(cls).data());
        let mut out = Vec::with_capacity(t * (n + 1) * d);
        for ti in 0..t {
            out.extend_from_slice(&cd[ti * d..(ti + 1) * d]);
            out.extend_from_slice(&td[ti * n * d..(ti + 1) * n * d]);
        }
        self.push(Tensor::new([t, n + 1, d], out), Op::PrependCls { tokens, cls }, &[tokens, cls])
    }

    /// Drops the class token and folds `[T, 1 + hp wp, D]` into a `[T, D, hp, wp]` map.
    pub fn fold_tokens(&mut self, x: Var, hp: usize, wp: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (t, sn, d) = (s[0], s[1], s[2]);
        assert_eq!(sn, hp * wp + 1, "token count does not match the map size");
        let xd = self.value(x).data();
        let n = hp * wp;
        let mut out = vec![0.0; t * d * n];
        for ti in 0..t {
            for i in 0..n {
                let row = &xd[(ti * sn + 1 + i) * d..(ti * sn + 2 + i) * d];
                for (di, v) in row.iter().enumerate() {
                    out[(ti * d + di) * n + i] = *v;
                }
            }
        }
        self.push(Tensor::new([t, d, hp, wp], out), Op::FoldTokens(x), &[x])
    }

    /// Class token of each phase: `[T, S, D] -> [T, D]`.
    pub fn cls_of(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (t, sn, d) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(t * d);
        for ti in 0..t {
            out.extend_from_slice(&xd[ti * sn * d..ti * sn * d + d]);
        }
        self.push(Tensor::new([t, d], out), Op::ClsOf(x), &[x])
    }

    /// Nearest-neighbour upsampling of `[B, C, h, w]` by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let s = self.shape(x).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * ho * wo];
        for bc in 0..b * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(bc * ho + y) * wo + xx] = xd[(bc * h + y / factor) * w + xx / factor];
                }
            }
        }
        self.push(Tensor::new([b, c, ho, wo], out), Op::Upsample { x, factor }, &[x])
    }

    /// Mean over all axes after the second: `[B, C, ..] -> [B, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let n = trailing(&s, 2);
        let out: Vec<f64> = self.value(x).data().chunks_exact(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
        self.push(Tensor::new([s[0], s[1]], out), Op::SpatialMean(x), &[x])
    }

    /// Max over all axes after the second; ties resolve to the first index.
    pub fn spatial_max(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let n = trailing(&s, 2);
        let mut out = Vec::with_capacity(s[0] * s[1]);
        let mut argmax = Vec::with_capacity(s[0] * s[1]);
        for r in self.value(x).data().chunks_exact(n) {
            let (mut bi, mut bv) = (0, r[0]);
            for (i, &v) in r.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            out.push(bv);
            argmax.push(bi);
        }
        self.push(Tensor::new([s[0], s[1]], out), Op::SpatialMax { x, argmax }, &[x])
    }

    /// Multiplies every `[b, c]` plane of `x` by `s[b, c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(self.shape(s), &shape[..2]);
        let n = trailing(&shape, 2);
        let sd = self.value(s).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(n)
            .zip(sd)
            .flat_map(|(r, &k)| r.iter().map(move |v| v * k))
            .collect();
        self.push(Tensor::new(shape, out), Op::ChannelScale { x, s }, &[x, s])
    }

    /// Adds `v[b, c]` to every element of the `[b, c]` plane of `x`.
    pub fn add_channel_vector(&mut self, x: Var, v: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(self.shape(v), &shape[..2]);
        let n = trailing(&shape, 2);
        let vd = self.value(v).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(n)
            .zip(vd)
            .flat_map(|(r, &k)| r.iter().map(move |e| e + k))
            .collect();
        self.push(Tensor::new(shape, out), Op::AddChannelVector { x, v }, &[x, v])
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn phase_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let mut shape = self.shape(x).to_vec();
        assert!(start + len <= shape[0]);
        let n = trailing(&shape, 1);
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        shape[0] = len;
        self.push(Tensor::new(shape, out), Op::PhaseSlice { x, start }, &[x])
    }

    /// `cls[k + 1] <- (1 + alpha * gate[k]) * cls[k + 1]`; the first row is untouched.
    pub fn cls_gate(&mut self, cls: Var, gate: Var, alpha: f64) -> Var {
        let s = self.shape(cls).to_vec();
        let (t, d) = (s[0], s[1]);
        assert_eq!(self.value(gate).len(), t - 1, "need one gate per adjacent phase pair");
        let gd = self.value(gate).data().to_vec();
        let mut out = self.value(cls).data().to_vec();
        for k in 0..t - 1 {
            let f = 1.0 + alpha * gd[k];
            for v in &mut out[(k + 1) * d..(k + 2) * d] {
                *v *= f;
            }
        }
        self.push(Tensor::new(s, out), Op::ClsGate { cls, gate, alpha }, &[cls, gate])
    }

    /// Softmax across axis 1 of `[B, C, ..]`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (b, c, n) = (shape[0], shape[1], trailing(&shape, 2));
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            let base = bi * c * n;
            for i in 0..n {
                let m = (0..c).map(|ci| xd[base + ci * n + i]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for ci in 0..c {
                    let e = (xd[base + ci * n + i] - m).exp();
                    out[base + ci * n + i] = e;
                    sum += e;
                }
                for ci in 0..c {
                    out[base + ci * n + i] /= sum;
                }
            }
        }
        self.push(Tensor::new(shape, out), Op::SoftmaxChannels(x), &[x])
    }

    /// Per-phase linear mixing: `a [T, P, H, W]`, `w [T, L, P]` to `[T, L, H, W]`.
    pub fn phase_decode(&mut self, a: Var, w: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sw = self.shape(w).to_vec();
        let (t, p) = (sa[0], sa[1]);
        assert_eq!(sw[0], t, "decoder phase count mismatch");
        assert_eq!(sw[2], p, "decoder width mismatch");
        let l = sw[1];
        let n = trailing(&sa, 2);
        let (ad, wd) = (self.value(a).data(), self.value(w).data());
        let mut out = vec![0.0; t * l * n];
        for ti in 0..t {
            gemm(
                l,
                p,
                n,
                1.0,
                &wd[ti * l * p..],
                Layout::row_major(p),
                &ad[ti * p * n..],
                Layout::row_major(n),
                0.0,
                &mut out[ti * l * n..],
                Layout::row_major(n),
            );
        }
        let mut shape = sa;
        shape[1] = l;
        self.push(Tensor::new(shape, out), Op::PhaseDecode { a, w }, &[a, w])
    }

    /// Reconstruction RMSE between a constant target and a prediction of the same shape.
    pub fn loss_re(&mut self, target: Var, pred: Var) -> Var {
        assert_eq!(self.shape(target), self.shape(pred));
        let v = objective::rmse(self.value(target).data(), self.value(pred).data());
        self.push(Tensor::scalar(v), Op::LossRe { target, pred }, &[target, pred])
    }

    /// Mean spectral angle between `[T, L, ..]` cubes.
    pub fn loss_sad(&mut self, target: Var, pred: Var) -> Result<Var> {
        let shape = self.shape(target).to_vec();
        assert_eq!(shape, self.shape(pred));
        let dims = CubeDims { phases: shape[0], bands: shape[1], pixels: trailing(&shape, 2) };
        let v = objective::sad(self.value(target).data(), self.value(pred).data(), dims)?;
        Ok(self.push(Tensor::scalar(v.value), Op::LossSad { target, pred, bands: shape[1] }, &[target, pred]))
    }

    /// Data-simplex loss of decoders `[T, L, P]` against anchors `[T, L]`.
    pub fn loss_simplex(&mut self, w: Var, anchors: Var) -> Var {
        let s = self.shape(w).to_vec();
        assert_eq!(self.shape(anchors), &s[..2]);
        let v = objective::simplex(self.value(w).data(), self.value(anchors).data(), s[0], s[1], s[2]);
        self.push(Tensor::scalar(v), Op::LossSimplex { w, anchors }, &[w, anchors])
    }
}

pub(crate) fn linear_backward(
    g_: &Graph,
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    x: Var,
    w: Var,
    b: Option<Var>,
) {
    let (inn, out) = (g_.shape(w)[0], g_.shape(w)[1]);
    let rows = g.len() / out;
    if g_.needs_grad(x) {
        let mut gx = vec![0.0; rows * inn];
        gemm(
            rows,
            out,
            inn,
            1.0,
            g.data(),
            Layout::row_major(out),
            g_.value(w).data(),
            Layout::transposed(out),
            0.0,
            &mut gx,
            Layout::row_major(inn),
        );
        g_.accumulate(grads, x, Tensor::new(g_.shape(x), gx));
    }
    if g_.needs_grad(w) {
        let mut gw = vec![0.0; inn * out];
        gemm(
            inn,
            rows,
            out,
            1.0,
            g_.value(x).data(),
            Layout::transposed(inn),
            g.data(),
            Layout::row_major(out),
            0.0,
            &mut gw,
            Layout::row_major(out),
        );
        g_.accumulate(grads, w, Tensor::new([inn, out], gw));
    }
    if let Some(b) = b {
        let mut gb = vec![0.0; out];
        for r in g.data().chunks_exact(out) {
            for (a, v) in gb.iter_mut().zip(r) {
                *a += v;
            }
        }
        g_.accumulate(grads, b, Tensor::new([out], gb));
    }
}

pub(crate) fn patchify_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, x: Var, patch: usize) {
    let s = g_.shape(x).to_vec();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (hp, wp) = (h / patch, w / patch);
    let feat = c * patch * patch;
    let gd = g.data();
    let mut gx = vec![0.0; t * c * h * w];
    for ti in 0..t {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let tok = (y / patch) * wp + xx / patch;
                    let f = (ci * patch + y % patch) * patch + xx % patch;
                    gx[((ti * c + ci) * h + y) * w + xx] = gd[(ti * hp * wp + tok) * feat + f];
                }
            }
        }
    }
    g_.accumulate(grads, x, Tensor::new(s, gx));
}

pub(crate) fn prepend_cls_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, tokens: Var, cls: Var) {
    let s = g_.shape(tokens).to_vec();
    let (t, n, d) = (s[0], s[1], s[2]);
    let gd = g.data();
    let mut gt = Vec::with_capacity(t * n * d);
    let mut gc = Vec::with_capacity(t * d);
    for ti in 0..t {
        let base = ti * (n + 1) * d;
        gc.extend_from_slice(&gd[base..base + d]);
        gt.extend_from_slice(&gd[base + d..base + (n + 1) * d]);
    }
    g_.accumulate(grads, tokens, Tensor::new(s, gt));
    g_.accumulate(grads, cls, Tensor::new([t, d], gc));
}

pub(crate) fn fold_tokens_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, x: Var) {
    let s = g_.shape(x).to_vec();
    let (t, sn, d) = (s[0], s[1], s[2]);
    let n = sn - 1;
    let gd = g.data();
    let mut gx = vec![0.0; t * sn * d];
    for ti in 0..t {
        for di in 0..d {
            for i in 0..n {
                gx[(ti * sn + 1 + i) * d + di] = gd[(ti * d + di) * n + i];
            }
        }
    }
    g_.accumulate(grads, x, Tensor::new(s, gx));
}

pub(crate) fn cls_of_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, x: Var) {
    let s = g_.shape(x).to_vec();
    let (t, sn, d) = (s[0], s[1], s[2]);
    let mut gx = vec![0.0; t * sn * d];
    for ti in 0..t {
        gx[ti * sn * d..ti * sn * d + d].copy_from_slice(&g.data()[ti * d..(ti + 1) * d]);
    }
    g_.accumulate(grads, x, Tensor::new(s, gx));
}

pub(crate) fn upsample_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, x: Var, factor: usize) {
    let s = g_.shape(x).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h * factor, w * factor);
    let gd = g.data();
    let mut gx = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        for y in 0..ho {
            for xx in 0..wo {
                gx[(bc * h + y / factor) * w + xx / factor] += gd[(bc * ho + y) * wo + xx];
            }
        }
    }
    g_.accumulate(grads, x, Tensor::new(s, gx));
}

pub(crate) fn spatial_mean_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, x: Var) {
    let s = g_.shape(x).to_vec();
    let n = trailing(&s, 2);
    let gx: Vec<f64> = g.data().iter().flat_map(|&d| std::iter::repeat_n(d / n as f64, n)).collect();
    g_.accumulate(grads, x, Tensor::new(s, gx));
}

pub(crate) fn spatial_max_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, x: Var, argmax: &[usize]) {
    let s = g_.shape(x).to_vec();
    let n = trailing(&s, 2);
    let mut gx = vec![0.0; g_.value(x).len()];
    for (r, (&d, &i)) in g.data().iter().zip(argmax).enumerate() {
        gx[r * n + i] = d;
    }
    g_.accumulate(grads, x, Tensor::new(s, gx));
}

pub(crate) fn channel_scale_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, x: Var, s: Var) {
    let shape = g_.shape(x).to_vec();
    let n = trailing(&shape, 2);
    let (xd, sd) = (g_.value(x).data(), g_.value(s).data());
    if g_.needs_grad(x) {
        let gx: Vec<f64> =
            g.data().chunks_exact(n).zip(sd).flat_map(|(r, &k)| r.iter().map(move |v| v * k)).collect();
        g_.accumulate(grads, x, Tensor::new(shape.clone(), gx));
    }
    if g_.needs_grad(s) {
        let gs: Vec<f64> = g
            .data()
            .chunks_exact(n)
            .zip(xd.chunks_exact(n))
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
            .collect();
        g_.accumulate(grads, s, Tensor::new(&shape[..2], gs));
    }
}

pub(crate) fn add_channel_vector_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, x: Var, v: Var) {
    let shape = g_.shape(x).to_vec();
    let n = trailing(&shape, 2);
    g_.accumulate(grads, x, g.clone());
    if g_.needs_grad(v) {
        let gv: Vec<f64> = g.data().chunks_exact(n).map(|r| r.iter().sum()).collect();
        g_.accumulate(grads, v, Tensor::new(&shape[..2], gv));
    }
}

pub(crate) fn phase_slice_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, x: Var, start: usize) {
    let shape = g_.shape(x).to_vec();
    let n = trailing(&shape, 1);
    let mut gx = vec![0.0; g_.value(x).len()];
    gx[start * n..start * n + g.len()].copy_from_slice(g.data());
    g_.accumulate(grads, x, Tensor::new(shape, gx));
}

pub(crate) fn cls_gate_backward(
    g_: &Graph,
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    cls: Var,
    gate: Var,
    alpha: f64,
) {
    let s = g_.shape(cls).to_vec();
    let (t, d) = (s[0], s[1]);
    let (cd, gd, dd) = (g_.value(cls).data(), g_.value(gate).data(), g.data());
    if g_.needs_grad(cls) {
        let mut gc = dd.to_vec();
        for k in 0..t - 1 {
            let f = 1.0 + alpha * gd[k];
            for v in &mut gc[(k + 1) * d..(k + 2) * d] {
                *v *= f;
            }
        }
        g_.accumulate(grads, cls, Tensor::new(s.clone(), gc));
    }
    if g_.needs_grad(gate) {
        let gg: Vec<f64> = (0..t - 1)
            .map(|k| {
                let r = (k + 1) * d..(k + 2) * d;
                alpha * dd[r.clone()].iter().zip(&cd[r]).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        g_.accumulate(grads, gate, Tensor::new(g_.shape(gate), gg));
    }
}

pub(crate) fn softmax_channels_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, y: &Tensor, x: Var) {
    let shape = y.shape();
    let (b, c, n) = (shape[0], shape[1], trailing(shape, 2));
    let (yd, gd) = (y.data(), g.data());
    let mut gx = vec![0.0; yd.len()];
    for bi in 0..b {
        let base = bi * c * n;
        for i in 0..n {
            let dot: f64 = (0..c).map(|ci| gd[base + ci * n + i] * yd[base + ci * n + i]).sum();
            for ci in 0..c {
                let j = base + ci * n + i;
                gx[j] = yd[j] * (gd[j] - dot);
            }
        }
    }
    g_.accumulate(grads, x, Tensor::new(shape, gx));
}

pub(crate) fn phase_decode_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, a: Var, w: Var) {
    let sa = g_.shape(a).to_vec();
    let sw = g_.shape(w).to_vec();
    let (t, p, l) = (sa[0], sa[1], sw[1]);
    let n = trailing(&sa, 2);
    let (ad, wd, gd) = (g_.value(a).data(), g_.value(w).data(), g.data());
    if g_.needs_grad(a) {
        let mut ga = vec![0.0; t * p * n];
        for ti in 0..t {
            gemm(
                p,
                l,
                n,
                1.0,
                &wd[ti * l * p..],
                Layout::transposed(p),
                &gd[ti * l * n..],
                Layout::row_major(n),
                0.0,
                &mut ga[ti * p * n..],
                Layout::row_major(n),
            );
        }
        g_.accumulate(grads, a, Tensor::new(sa.clone(), ga));
    }
    if g_.needs_grad(w) {
        let mut gw = vec![0.0; t * l * p];
        for ti in 0..t {
            gemm(
                l,
                n,
                p,
                1.0,
                &gd[ti * l * n..],
                Layout::row_major(n),
                &ad[ti * p * n..],
                Layout::transposed(n),
                0.0,
                &mut gw[ti * l * p..],
                Layout::row_major(p),
            );
        }
        g_.accumulate(grads, w, Tensor::new(sw, gw));
    }
}

pub(crate) fn loss_re_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, target: Var, pred: Var) {
    let (_, gp) = objective::rmse_grad(g_.value(target).data(), g_.value(pred).data());
    let d = g.item();
    g_.accumulate(grads, pred, Tensor::new(g_.shape(pred), gp.into_iter().map(|v| v * d).collect()));
}

pub(crate) fn loss_sad_backward(
    g_: &Graph,
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    target: Var,
    pred: Var,
    bands: usize,
) {
    let shape = g_.shape(pred).to_vec();
    let dims = CubeDims { phases: shape[0], bands, pixels: trailing(&shape, 2) };
    let (_, gp) = objective::sad_grad(g_.value(target).data(), g_.value(pred).data(), dims)
        .expect("spectral angle was finite in the forward pass");
    let d = g.item();
    g_.accumulate(grads, pred, Tensor::new(shape, gp.into_iter().map(|v| v * d).collect()));
}

pub(crate) fn loss_simplex_backward(g_: &Graph, grads: &mut [Option<Tensor>], g: &Tensor, w: Var, anchors: Var) {
    let s = g_.shape(w).to_vec();
    let (_, gw) = objective::simplex_grad(g_.value(w).data(), g_.value(anchors).data(), s[0], s[1], s[2]);
    let d = g.item();
    g_.accumulate(grads, w, Tensor::new(s, gw.into_iter().map(|v| v * d).collect()));
}
