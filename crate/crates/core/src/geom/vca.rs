//! Vertex component analysis.
//!
//! Follows the reference algorithm: estimate the SNR, project either onto the
//! affine (P-1)-dimensional subspace lifted by a constant coordinate (low SNR)
//! or onto the P-dimensional signal subspace followed by a projective
//! normalisation (high SNR), then repeatedly pick the pixel with the largest
//! projection onto a random direction orthogonal to the endmembers found so far.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct VcaResult {
    /// `L x P`, columns are (projected) pixels of the input, negatives clamped to 0.
    pub endmembers: DMatrix<f64>,
    pub selected_pixel_indices: Vec<usize>,
    /// Dimension of the subspace the search ran in.
    pub projection_dim: usize,
}

/// Eigenvectors of a symmetric matrix for its `k` largest eigenvalues, plus those eigenvalues.
fn top_eigen(sym: DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vecs = DMatrix::from_fn(eig.eigenvectors.nrows(), k, |r, c| eig.eigenvectors[(r, order[c])]);
    let vals = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    (vecs, vals)
}

fn check_rank(vals: &[f64], what: &str) -> Result<()> {
    let top = vals[0];
    let last = *vals.last().unwrap();
    if !(top > 0.0) || last <= 1e-12 * top {
        return Err(Error::Degenerate(format!(
            "data spans fewer than {} dimensions in the {what} (eigenvalue ratio {:.3e})",
            vals.len(),
            last / top
        )));
    }
    Ok(())
}

/// SNR estimate (dB) from total power and the power captured by the `p`-dim projection.
fn estimate_snr(r: &DMatrix<f64>, mean: &DVector<f64>, x: &DMatrix<f64>) -> f64 {
    let (l, n) = r.shape();
    let p = x.nrows() as f64;
    let p_y = r.norm_squared() / n as f64;
    let p_x = x.norm_squared() / n as f64 + mean.norm_squared();
    let signal = p_x - p / l as f64 * p_y;
    let noise = p_y - p_x;
    if noise <= 0.0 {
        return f64::INFINITY;
    }
    if signal <= 0.0 {
        return f64::NEG_INFINITY;
    }
    10.0 * (signal / noise).log10()
}

/// Extracts `p` endmembers from `y` (`L x N`), deterministic in `seed`.
pub fn vca(y: &DMatrix<f64>, p: usize, seed: u64) -> Result<VcaResult> {
    let (l, n) = y.shape();
    if p == 0 || n < p || l < p {
        return Err(Error::Degenerate(format!("cannot extract {p} endmembers from {l} bands x {n} pixels")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("VCA input holds non-finite values".into()));
    }
    let n_f = n as f64;

    if p == 1 {
        let (u, vals) = top_eigen(y * y.transpose() / n_f, 1);
        check_rank(&vals, "signal subspace")?;
        let x = u.tr_mul(y);
        let best = (0..n).max_by(|&a, &b| x[(0, a)].abs().total_cmp(&x[(0, b)].abs())).unwrap();
        let col = &u * x.column(best);
        return Ok(VcaResult {
            endmembers: DMatrix::from_fn(l, 1, |r, _| col[r].max(0.0)),
            selected_pixel_indices: vec![best],
            projection_dim: 1,
        });
    }

    let mean = y.column_mean();
    let mut centred = y.clone();
    for mut col in centred.column_iter_mut() {
        col -= &mean;
    }
    let (u_centred, vals_centred) = top_eigen(&centred * centred.transpose() / n_f, p);
    let x_centred = u_centred.tr_mul(&centred);
    let snr = estimate_snr(y, &mean, &x_centred);
    let snr_threshold = 15.0 + 10.0 * (p as f64).log10();

    let (projected, lifted, dim) = if snr < snr_threshold {
        let d = p - 1;
        check_rank(&vals_centred[..d], "affine signal subspace")?;
        let ud = u_centred.columns(0, d).into_owned();
        let x = x_centred.rows(0, d).into_owned();
        let mut projected = &ud * &x;
        for mut col in projected.column_iter_mut() {
            col += &mean;
        }
        let c = x.column_iter().map(|col| col.norm()).fold(0.0, f64::max);
        let lifted = DMatrix::from_fn(p, n, |r, j| if r < d { x[(r, j)] } else { c });
        (projected, lifted, d)
    } else {
        let (ud, vals) = top_eigen(y * y.transpose() / n_f, p);
        check_rank(&vals, "signal subspace")?;
        let x = ud.tr_mul(y);
        let projected = &ud * &x;
        let u = x.column_mean();
        let mut lifted = x.clone();
        for (j, mut col) in lifted.column_iter_mut().enumerate() {
            let denom = x.column(j).dot(&u);
            col /= denom;
        }
        (projected, lifted, p)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::<f64>::zeros(p, p);
    a[(p - 1, 0)] = 1.0;
    let mut indices = Vec::with_capacity(p);
    for i in 0..p {
        let w = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let pinv = a.clone().pseudo_inverse(1e-12).map_err(|e| Error::Degenerate(e.to_string()))?;
        let mut f = &w - &a * (pinv * &w);
        let norm = f.norm();
        if norm > 0.0 {
            f /= norm;
        }
        let v = lifted.tr_mul(&f);
        let best = (0..n).max_by(|&x, &z| v[x].abs().total_cmp(&v[z].abs())).unwrap();
        a.set_column(i, &lifted.column(best));
        indices.push(best);
    }

    let endmembers = DMatrix::from_fn(l, p, |r, c| projected[(r, indices[c])].max(0.0));
    Ok(VcaResult { endmembers, selected_pixel_indices: indices, projection_dim: dim })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sad(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        (dot / (na * nb)).clamp(-1.0, 1.0).acos()
    }

    /// Convex mixtures of `p` random spectra with the pure pixels planted at the front.
    fn planted(seed: u64, l: usize, p: usize, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(l, p, |_, _| rng.random_range(0.05..1.0));
        let mut y = DMatrix::zeros(l, n);
        for j in 0..n {
            let a: Vec<f64> = if j < p {
                (0..p).map(|k| if k == j { 1.0 } else { 0.0 }).collect()
            } else {
                let e: Vec<f64> = (0..p).map(|_| -rng.random_range(1e-9f64..1.0).ln()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| 0.2 + 0.6 * v / s).map(|v| v / (0.2 * p as f64 + 0.6)).collect()
            };
            y.set_column(j, &(&m * DVector::from_vec(a)));
        }
        (y, m)
    }

    #[test]
    fn recovers_planted_pure_pixels() {
        let (y, m) = planted(4, 20, 3, 300);
        let r = vca(&y, 3, 1).unwrap();
        for k in 0..3 {
            let truth: Vec<f64> = m.column(k).iter().copied().collect();
            let best = (0..3)
                .map(|j| sad(&truth, r.endmembers.column(j).as_slice()))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "endmember {k}: SAD {best}");
        }
    }

    #[test]
    fn single_endmember_is_max_norm_pixel() {
        let y = DMatrix::from_row_slice(2, 3, &[1.0, 3.0, 2.0, 1.0, 3.0, 2.0]);
        let r = vca(&y, 1, 0).unwrap();
        assert_eq!(r.selected_pixel_indices, vec![1]);
        assert!((r.endmembers[(0, 0)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_in_seed() {
        let (y, _) = planted(5, 12, 3, 100);
        assert_eq!(vca(&y, 3, 9).unwrap(), vca(&y, 3, 9).unwrap());
    }

    #[test]
    fn rank_deficient_data_errors() {
        let col = DVector::from_vec(vec![0.2, 0.4, 0.6, 0.8]);
        let y = DMatrix::from_fn(4, 50, |r, j| col[r] * (1.0 + (j % 3) as f64));
        assert!(matches!(vca(&y, 3, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pixel_permutation_changes_only_indices() {
        let (y, _) = planted(6, 15, 3, 120);
        let perm: Vec<usize> = (0..120).rev().collect();
        let yp = DMatrix::from_fn(15, 120, |r, j| y[(r, perm[j])]);
        let a = vca(&y, 3, 2).unwrap();
        let b = vca(&yp, 3, 2).unwrap();
        for j in 0..3 {
            assert_eq!(perm[b.selected_pixel_indices[j]], a.selected_pixel_indices[j]);
            for r in 0..15 {
                assert!((a.endmembers[(r, j)] - b.endmembers[(r, j)]).abs() < 1e-9);
            }
        }
    }
}
