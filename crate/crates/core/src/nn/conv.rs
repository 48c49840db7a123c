//! Stride-1 2-d convolution (im2col + gemm) and batch normalisation.

use super::gemm::{gemm, Layout};
use super::graph::{Graph, Op, Var};
use super::tensor::Tensor;

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.ho * g.wo;
    let mut col = vec![0.0; g.col_rows() * cols];
    for ci in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy - g.pad) * g.w..(ci * g.h + iy - g.pad + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox + kx;
                        if ix >= g.pad && ix - g.pad < g.w {
                            dst[oy * g.wo + ox] = src[ix - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.ho * g.wo;
    let mut x = vec![0.0; g.ci * g.h * g.w];
    for ci in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let dst = &mut x[(ci * g.h + iy - g.pad) * g.w..(ci * g.h + iy - g.pad + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox + kx;
                        if ix >= g.pad && ix - g.pad < g.w {
                            dst[ix - g.pad] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn geometry(xs: &[usize], ws: &[usize], pad: usize) -> ConvGeom {
    assert_eq!(xs.len(), 4, "conv input must be [B, C, H, W]");
    assert_eq!(ws.len(), 4, "conv weight must be [Co, Ci, k, k]");
    assert_eq!(ws[1], xs[1], "conv expects {} input channels, got {}", ws[1], xs[1]);
    assert_eq!(ws[2], ws[3], "square kernels only");
    let k = ws[2];
    assert!(xs[2] + 2 * pad >= k && xs[3] + 2 * pad >= k, "kernel larger than padded input");
    ConvGeom { ci: xs[1], h: xs[2], w: xs[3], k, pad, ho: xs[2] + 2 * pad - k + 1, wo: xs[3] + 2 * pad - k + 1 }
}

impl Graph {
    /// Stride-1 convolution with zero padding: `x [B, Ci, H, W]`, `w [Co, Ci, k, k]`, `b [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let geo = geometry(&xs, &ws, pad);
        let (batch, co) = (xs[0], ws[0]);
        let per_in = geo.ci * geo.h * geo.w;
        let cols = geo.ho * geo.wo;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let images = self.exec().map_range(batch, |bi| {
            let xi = &xd[bi * per_in..(bi + 1) * per_in];
            let owned;
            let col: &[f64] = if geo.is_pointwise() {
                xi
            } else {
                owned = im2col(xi, &geo);
                &owned
            };
            let mut out = vec![0.0; co * cols];
            let beta = match bias {
                Some(bias) => {
                    for (r, &bv) in out.chunks_exact_mut(cols).zip(bias) {
                        r.fill(bv);
                    }
                    1.0
                }
                None => 0.0,
            };
            gemm(
                co,
                geo.col_rows(),
                cols,
                1.0,
                wd,
                Layout::row_major(geo.col_rows()),
                col,
                Layout::row_major(cols),
                beta,
                &mut out,
                Layout::row_major(cols),
            );
            out
        });
        let value = Tensor::new([batch, co, geo.ho, geo.wo], images.concat());
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Conv2d { x, w, b, pad }, &parents)
    }

    /// Per-channel batch normalisation over axes 0 and 2.. using batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (b, c) = (shape[0], shape[1]);
        let n: usize = shape[2..].iter().product();
        let m = (b * n) as f64;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(gd.len(), c);
        assert_eq!(bd.len(), c);
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; xd.len()];
        for ci in 0..c {
            let planes = || (0..b).map(move |bi| (bi * c + ci) * n..(bi * c + ci + 1) * n);
            let mean = planes().map(|r| xd[r].iter().sum::<f64>()).sum::<f64>() / m;
            let var = planes().map(|r| xd[r].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()).sum::<f64>() / m;
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ci] = is;
            for r in planes() {
                for j in r {
                    let h = (xd[j] - mean) * is;
                    xhat[j] = h;
                    out[j] = gd[ci] * h + bd[ci];
                }
            }
        }
        self.push(Tensor::new(shape, out), Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }
}

pub(crate) fn conv2d_backward(
    g_: &Graph,
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    x: Var,
    w: Var,
    b: Option<Var>,
    pad: usize,
) {
    let xs = g_.shape(x).to_vec();
    let ws = g_.shape(w).to_vec();
    let geo = geometry(&xs, &ws, pad);
    let (batch, co) = (xs[0], ws[0]);
    let per_in = geo.ci * geo.h * geo.w;
    let cols = geo.ho * geo.wo;
    let rows = geo.col_rows();
    let (xd, wd, gd) = (g_.value(x).data(), g_.value(w).data(), g.data());
    let want_x = g_.needs_grad(x);
    let want_w = g_.needs_grad(w);
    // per-image partials, reduced below in image order so the result does not depend on scheduling
    let parts = g_.exec().map_range(batch, |bi| {
        let gi = &gd[bi * co * cols..(bi + 1) * co * cols];
        let gw = want_w.then(|| {
            let xi = &xd[bi * per_in..(bi + 1) * per_in];
            let owned;
            let col: &[f64] = if geo.is_pointwise() {
                xi
            } else {
                owned = im2col(xi, &geo);
                &owned
            };
            let mut gw = vec![0.0; co * rows];
            gemm(
                co,
                cols,
                rows,
                1.0,
                gi,
                Layout::row_major(cols),
                col,
                Layout::transposed(cols),
                0.0,
                &mut gw,
                Layout::row_major(rows),
            );
            gw
        });
        let gx = want_x.then(|| {
            let mut gcol = vec![0.0; rows * cols];
            gemm(
                rows,
                co,
                cols,
                1.0,
                wd,
                Layout::transposed(rows),
                gi,
                Layout::row_major(cols),
                0.0,
                &mut gcol,
                Layout::row_major(cols),
            );
            if geo.is_pointwise() {
                gcol
            } else {
                col2im(&gcol, &geo)
            }
        });
        (gw, gx)
    });
    let mut gw_total = want_w.then(|| vec![0.0; co * rows]);
    let mut gx_total = want_x.then(|| Vec::with_capacity(batch * per_in));
    for (gw, gx) in parts {
        if let (Some(total), Some(gw)) = (gw_total.as_mut(), gw) {
            for (a, v) in total.iter_mut().zip(gw) {
                *a += v;
            }
        }
        if let (Some(total), Some(gx)) = (gx_total.as_mut(), gx) {
            total.extend_from_slice(&gx);
        }
    }
    if let Some(gw) = gw_total {
        g_.accumulate(grads, w, Tensor::new(ws, gw));
    }
    if let Some(gx) = gx_total {
        g_.accumulate(grads, x, Tensor::new(xs, gx));
    }
    if let Some(b) = b {
        let mut gb = vec![0.0; co];
        for bi in 0..batch {
            for (c, acc) in gb.iter_mut().enumerate() {
                *acc += gd[(bi * co + c) * cols..(bi * co + c + 1) * cols].iter().sum::<f64>();
            }
        }
        g_.accumulate(grads, b, Tensor::new([co], gb));
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward(
    g_: &Graph,
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    inv_std: &[f64],
) {
    let shape = g_.shape(x).to_vec();
    let (b, c) = (shape[0], shape[1]);
    let n: usize = shape[2..].iter().product();
    let m = (b * n) as f64;
    let (gd, gam) = (g.data(), g_.value(gamma).data());
    let mut gx = vec![0.0; gd.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ci in 0..c {
        let planes = || (0..b).map(move |bi| (bi * c + ci) * n..(bi * c + ci + 1) * n);
        let (mut sg, mut sgx) = (0.0, 0.0);
        for r in planes() {
            for j in r {
                sg += gd[j];
                sgx += gd[j] * xhat[j];
            }
        }
        ggamma[ci] = sgx;
        gbeta[ci] = sg;
        let k = gam[ci] * inv_std[ci];
        for r in planes() {
            for j in r {
                gx[j] = k * (gd[j] - sg / m - xhat[j] * sgx / m);
            }
        }
    }
    g_.accumulate(grads, x, Tensor::new(shape, gx));
    g_.accumulate(grads, gamma, Tensor::new([c], ggamma));
    g_.accumulate(grads, beta, Tensor::new([c], gbeta));
}
