//! Training losses: reconstruction RMSE, mean spectral angle and the
//! data-simplex pull of the decoder endmembers toward each phase centroid.
//!
//! The slice-level functions work on `[T][L][N]` buffers and also return
//! gradients; the graph loss nodes are thin wrappers around them.

use serde::{Deserialize, Serialize};

use crate::datamodel::{EndmemberSet, HyperCubeSequence};
use crate::{Error, Result};

/// Weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(rename = "lambda", default = "default_lambda")]
    pub lambda_: f64,
}

fn default_beta() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    1e-4
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: default_beta(), gamma: default_gamma(), lambda_: default_lambda() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda_)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Dimensions of a `[T][L][N]` buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CubeDims {
    pub phases: usize,
    pub bands: usize,
    pub pixels: usize,
}

impl CubeDims {
    pub fn of(seq: &HyperCubeSequence) -> Self {
        Self { phases: seq.phases(), bands: seq.bands(), pixels: seq.pixels() }
    }

    pub fn len(&self) -> usize {
        self.phases * self.bands * self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Spectral-angle loss value with the number of skipped zero-norm pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SadValue {
    pub value: f64,
    pub excluded: usize,
}

/// Root mean squared error over every entry.
pub fn rmse(y: &[f64], yhat: &[f64]) -> f64 {
    assert_eq!(y.len(), yhat.len());
    let ss: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    (ss / y.len() as f64).sqrt()
}

/// RMSE and its gradient with respect to `yhat`. The gradient at a perfect fit is taken as zero.
pub fn rmse_grad(y: &[f64], yhat: &[f64]) -> (f64, Vec<f64>) {
    let value = rmse(y, yhat);
    let n = y.len() as f64;
    let grad = if value > 0.0 {
        y.iter().zip(yhat).map(|(a, b)| (b - a) / (n * value)).collect()
    } else {
        vec![0.0; y.len()]
    };
    (value, grad)
}

fn pixel_spectra(data: &[f64], dims: CubeDims, t: usize, n: usize) -> impl Iterator<Item = f64> + '_ {
    let base = t * dims.bands * dims.pixels + n;
    (0..dims.bands).map(move |l| data[base + l * dims.pixels])
}

/// Mean spectral angle over all pixels and phases; zero-norm pixels are skipped.
pub fn sad(y: &[f64], yhat: &[f64], dims: CubeDims) -> Result<SadValue> {
    sad_impl(y, yhat, dims, None)
}

/// Mean spectral angle and its gradient with respect to `yhat`.
pub fn sad_grad(y: &[f64], yhat: &[f64], dims: CubeDims) -> Result<(SadValue, Vec<f64>)> {
    let mut grad = vec![0.0; yhat.len()];
    let v = sad_impl(y, yhat, dims, Some(&mut grad))?;
    Ok((v, grad))
}

fn sad_impl(y: &[f64], yhat: &[f64], dims: CubeDims, mut grad: Option<&mut [f64]>) -> Result<SadValue> {
    if y.len() != dims.len() || yhat.len() != dims.len() {
        return Err(Error::Shape(format!(
            "spectral angle inputs hold {} and {} values, dims imply {}",
            y.len(),
            yhat.len(),
            dims.len()
        )));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut coeffs = Vec::new();
    for t in 0..dims.phases {
        for n in 0..dims.pixels {
            let (mut dot, mut ny, mut nh) = (0.0, 0.0, 0.0);
            for (a, b) in pixel_spectra(y, dims, t, n).zip(pixel_spectra(yhat, dims, t, n)) {
                dot += a * b;
                ny += a * a;
                nh += b * b;
            }
            if ny == 0.0 || nh == 0.0 {
                continue;
            }
            let (ny, nh) = (ny.sqrt(), nh.sqrt());
            let c = (dot / (ny * nh)).clamp(-1.0, 1.0);
            total += c.acos();
            used += 1;
            if grad.is_some() {
                let s2 = 1.0 - c * c;
                // d acos(c) / d yhat = -(y / (|y||yhat|) - c yhat / |yhat|^2) / sqrt(1 - c^2)
                if s2 > 1e-24 {
                    let k = -1.0 / s2.sqrt();
                    coeffs.push((t, n, k / (ny * nh), -k * c / (nh * nh)));
                }
            }
        }
    }
    let excluded = dims.phases * dims.pixels - used;
    if used == 0 {
        return Err(Error::Degenerate("every spectrum has zero norm; spectral angle undefined".into()));
    }
    if excluded > 0 {
        log::warn!("spectral angle loss skipped {excluded} zero-norm spectra");
    }
    if let Some(g) = grad.as_deref_mut() {
        let inv = 1.0 / used as f64;
        for (t, n, ay, ah) in coeffs {
            let base = t * dims.bands * dims.pixels + n;
            for l in 0..dims.bands {
                let i = base + l * dims.pixels;
                g[i] = inv * (ay * y[i] + ah * yhat[i]);
            }
        }
    }
    Ok(SadValue { value: total / used as f64, excluded })
}

/// `sum_t || W_t - m_t 1^T ||_F^2` for decoders `[T][L][P]` and anchors `[T][L]`.
pub fn simplex(w: &[f64], anchors: &[f64], phases: usize, bands: usize, endmembers: usize) -> f64 {
    simplex_impl(w, anchors, phases, bands, endmembers, None)
}

/// Simplex loss and its gradient with respect to the decoders.
pub fn simplex_grad(w: &[f64], anchors: &[f64], phases: usize, bands: usize, endmembers: usize) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; w.len()];
    let v = simplex_impl(w, anchors, phases, bands, endmembers, Some(&mut g));
    (v, g)
}

fn simplex_impl(w: &[f64], anchors: &[f64], phases: usize, bands: usize, p: usize, mut g: Option<&mut [f64]>) -> f64 {
    assert_eq!(w.len(), phases * bands * p);
    assert_eq!(anchors.len(), phases * bands);
    let mut total = 0.0;
    for t in 0..phases {
        for l in 0..bands {
            let m = anchors[t * bands + l];
            for j in 0..p {
                let i = (t * bands + l) * p + j;
                let d = w[i] - m;
                total += d * d;
                if let Some(g) = g.as_deref_mut() {
                    g[i] = 2.0 * d;
                }
            }
        }
    }
    total
}

fn check_same_shape(y: &HyperCubeSequence, yhat: &HyperCubeSequence) -> Result<()> {
    if CubeDims::of(y) != CubeDims::of(yhat) || y.height() != yhat.height() {
        return Err(Error::Shape(format!(
            "cube shapes differ: {:?} vs {:?}",
            (y.phases(), y.bands(), y.height(), y.width()),
            (yhat.phases(), yhat.bands(), yhat.height(), yhat.width())
        )));
    }
    Ok(())
}

/// Reconstruction RMSE between two cubes.
pub fn loss_re(y: &HyperCubeSequence, yhat: &HyperCubeSequence) -> Result<f64> {
    check_same_shape(y, yhat)?;
    Ok(rmse(&y.to_f64(), &yhat.to_f64()))
}

/// Mean spectral angle between corresponding pixels of two cubes.
pub fn loss_sad(y: &HyperCubeSequence, yhat: &HyperCubeSequence) -> Result<f64> {
    check_same_shape(y, yhat)?;
    Ok(sad(&y.to_f64(), &yhat.to_f64(), CubeDims::of(y))?.value)
}

/// Data-simplex loss of an endmember set against per-phase anchor spectra.
pub fn loss_simplex(endmembers: &EndmemberSet, anchors: &[Vec<f64>]) -> Result<f64> {
    let (t, l, p) = (endmembers.phases(), endmembers.bands(), endmembers.endmembers());
    if anchors.len() != t || anchors.iter().any(|a| a.len() != l) {
        return Err(Error::Shape(format!("need {t} anchors of length {l}")));
    }
    let w: Vec<f64> = endmembers.per_phase_data().iter().map(|&v| f64::from(v)).collect();
    let flat: Vec<f64> = anchors.concat();
    Ok(simplex(&w, &flat, t, l, p))
}

/// Mean observed spectrum of every phase, the default simplex anchors.
pub fn phase_anchors(seq: &HyperCubeSequence) -> Vec<Vec<f64>> {
    seq.phase_means()
}

/// `beta * L_re + gamma * L_sad + lambda * L_simplex`.
pub fn total_loss(
    y: &HyperCubeSequence,
    yhat: &HyperCubeSequence,
    endmembers: &EndmemberSet,
    anchors: &[Vec<f64>],
    w: &LossWeights,
) -> Result<f64> {
    w.validate()?;
    if endmembers.phases() != y.phases() || endmembers.bands() != y.bands() {
        return Err(Error::Shape("endmember set does not match the cube".into()));
    }
    let re = loss_re(y, yhat)?;
    let sad = if w.gamma > 0.0 { loss_sad(y, yhat)? } else { 0.0 };
    let simplex = loss_simplex(endmembers, anchors)?;
    Ok(w.beta * re + w.gamma * sad + w.lambda_ * simplex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(t: usize, l: usize, h: usize, w: usize, data: Vec<f64>) -> HyperCubeSequence {
        HyperCubeSequence::from_f64(t, l, h, w, &data).unwrap()
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.05..1.0)).collect()
    }

    #[test]
    fn re_zero_and_unit() {
        let y = cube(2, 3, 2, 2, random(24, 1));
        assert_eq!(loss_re(&y, &y).unwrap(), 0.0);
        let z = cube(2, 3, 2, 2, vec![0.0; 24]);
        let o = cube(2, 3, 2, 2, vec![1.0; 24]);
        assert!((loss_re(&z, &o).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn re_matches_direct_formula() {
        let a = random(60, 2);
        let b = random(60, 3);
        let ya = cube(3, 4, 5, 1, a);
        let yb = cube(3, 4, 5, 1, b);
        let (fa, fb) = (ya.to_f64(), yb.to_f64());
        let mse: f64 = fa.iter().zip(&fb).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / 60.0;
        assert!((loss_re(&ya, &yb).unwrap() - mse.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn re_shape_mismatch() {
        let a = cube(1, 3, 2, 2, vec![0.1; 12]);
        let b = cube(1, 4, 3, 1, vec![0.1; 12]);
        assert!(matches!(loss_re(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn sad_identity_scale_orthogonal() {
        let y = cube(2, 3, 2, 1, random(12, 4));
        assert!(loss_sad(&y, &y).unwrap() < 1e-7);
        let y2 = cube(2, 3, 2, 1, y.to_f64().iter().map(|v| 2.0 * v).collect());
        assert!(loss_sad(&y, &y2).unwrap() < 1e-7);
        // one pixel per phase, bands [1,0] vs [0,1]
        let a = cube(2, 2, 1, 1, vec![1.0, 0.0, 1.0, 0.0]);
        let b = cube(2, 2, 1, 1, vec![0.0, 1.0, 0.0, 3.0]);
        assert!((loss_sad(&a, &b).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn sad_skips_zero_spectra_and_errors_when_all_zero() {
        // pixel 0 zero in y; pixel 1 identical
        let y = [0.0, 1.0, 0.0, 2.0];
        let yh = [1.0, 1.0, 1.0, 2.0];
        let dims = CubeDims { phases: 1, bands: 2, pixels: 2 };
        let v = sad(&y, &yh, dims).unwrap();
        assert_eq!(v.excluded, 1);
        assert!(v.value.abs() < 1e-7);
        let z = [0.0; 4];
        assert!(matches!(sad(&z, &yh, dims), Err(Error::Degenerate(_))));
    }

    #[test]
    fn simplex_examples() {
        let m = vec![0.3, 0.6, 0.2];
        let cols = vec![m.iter().flat_map(|&v| [v, v]).collect::<Vec<f64>>()];
        let e = EndmemberSet::from_f64(3, 2, &cols).unwrap();
        assert!(loss_simplex(&e, &[m.clone()]).unwrap() < 1e-12);
        let delta = [0.1, -0.05, 0.2, 0.0, -0.1, 0.15];
        let shifted: Vec<f64> = cols[0].iter().zip(&delta).map(|(a, d)| a + d).collect();
        let e2 = EndmemberSet::from_f64(3, 2, &[shifted]).unwrap();
        let expected: f64 = delta.iter().map(|d| d * d).sum();
        assert!((loss_simplex(&e2, &[m]).unwrap() - expected).abs() < 1e-7);
    }

    #[test]
    fn simplex_matches_direct_formula() {
        let w = random(2 * 5 * 3, 5);
        let anchors = random(10, 6);
        let mut direct = 0.0;
        for t in 0..2 {
            for l in 0..5 {
                for j in 0..3 {
                    direct += (w[t * 15 + l * 3 + j] - anchors[t * 5 + l]).powi(2);
                }
            }
        }
        assert!((simplex(&w, &anchors, 2, 5, 3) - direct).abs() < 1e-10);
    }

    fn total_setup() -> (HyperCubeSequence, HyperCubeSequence, EndmemberSet, Vec<Vec<f64>>) {
        let y = cube(2, 4, 3, 1, random(24, 7));
        let yh = cube(2, 4, 3, 1, random(24, 8));
        let e = EndmemberSet::from_f64(4, 2, &[random(8, 9), random(8, 10)]).unwrap();
        let anchors = phase_anchors(&y);
        (y, yh, e, anchors)
    }

    #[test]
    fn total_loss_weights() {
        let (y, yh, e, anchors) = total_setup();
        let re_only = LossWeights { beta: 1.0, gamma: 0.0, lambda_: 0.0 };
        assert_eq!(total_loss(&y, &yh, &e, &anchors, &re_only).unwrap(), loss_re(&y, &yh).unwrap());
        let zero = LossWeights { beta: 0.0, gamma: 0.0, lambda_: 0.0 };
        assert_eq!(total_loss(&y, &yh, &e, &anchors, &zero).unwrap(), 0.0);
        let w = LossWeights::default();
        let w2 = LossWeights { gamma: 2.0 * w.gamma, ..w };
        let d = total_loss(&y, &yh, &e, &anchors, &w2).unwrap() - total_loss(&y, &yh, &e, &anchors, &w).unwrap();
        assert!((d - w.gamma * loss_sad(&y, &yh).unwrap()).abs() < 1e-12);
        let bad = LossWeights { beta: -1.0, ..w };
        assert!(total_loss(&y, &yh, &e, &anchors, &bad).is_err());
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "entry {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dims = CubeDims { phases: 2, bands: 4, pixels: 3 };
        let y = random(24, 11);
        let yh = random(24, 12);
        let (_, g) = rmse_grad(&y, &yh);
        fd_check(|x| rmse(&y, x), &yh, &g);
        let (_, g) = sad_grad(&y, &yh, dims).unwrap();
        fd_check(|x| sad(&y, x, dims).unwrap().value, &yh, &g);
        let w = random(2 * 4 * 3, 13);
        let anchors = random(8, 14);
        let (_, g) = simplex_grad(&w, &anchors, 2, 4, 3);
        fd_check(|x| simplex(x, &anchors, 2, 4, 3), &w, &g);
    }

    #[test]
    fn weights_json_keys() {
        let w: LossWeights = serde_json::from_str(r#"{"beta":2,"gamma":0.5,"lambda":0.01}"#).unwrap();
        assert_eq!(w, LossWeights { beta: 2.0, gamma: 0.5, lambda_: 0.01 });
        let d: LossWeights = serde_json::from_str("{}").unwrap();
        assert_eq!(d, LossWeights::default());
    }

    proptest! {
        #[test]
        fn sad_is_scale_invariant(seed in 0u64..1000, s1 in 0.1f64..10.0, s2 in 0.1f64..10.0) {
            let dims = CubeDims { phases: 1, bands: 5, pixels: 4 };
            let y = random(20, seed);
            let yh = random(20, seed + 1);
            let base = sad(&y, &yh, dims).unwrap().value;
            let ys: Vec<f64> = y.iter().map(|v| v * s1).collect();
            let yhs: Vec<f64> = yh.iter().map(|v| v * s2).collect();
            prop_assert!((sad(&ys, &yhs, dims).unwrap().value - base).abs() < 1e-9);
        }

        #[test]
        fn re_nonnegative_and_zero_only_at_equality(seed in 0u64..1000, i in 0usize..20, d in 1e-3f64..1.0) {
            let y = random(20, seed);
            let mut yh = y.clone();
            prop_assert_eq!(rmse(&y, &yh), 0.0);
            yh[i] += d;
            prop_assert!(rmse(&y, &yh) > 0.0);
        }
    }
}
