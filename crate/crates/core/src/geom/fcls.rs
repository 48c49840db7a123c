use nalgebra::{DMatrix, DVector};

use crate::datamodel::{AbundanceSequence, EndmemberSet, HyperCubeSequence};
use crate::exec::Exec;
use crate::{Error, Result};

/// Smallest admissible eigenvalue ratio of `M^T M`.
const MIN_GRAM_RCOND: f64 = 1e-12;

/// Per-pixel fully constrained least squares against a fixed endmember matrix.
///
/// Solves `min ||y - M a||^2 s.t. a >= 0, 1^T a = 1` with a primal active-set
/// method. Each subproblem is the equality-constrained QP on the free set,
/// solved exactly through its KKT system, so the sum-to-one constraint holds
/// to rounding rather than through a penalty weight.
#[derive(Clone, Debug)]
pub struct FclsSolver {
    m: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl FclsSolver {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let p = m.ncols();
        if p == 0 || m.nrows() < p {
            return Err(Error::Conditioning(format!("{}x{} endmember matrix cannot have full column rank", m.nrows(), p)));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("endmember matrix holds non-finite values".into()));
        }
        let gram = m.transpose() * m;
        let eig = gram.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 0.0) || lo / hi < MIN_GRAM_RCOND {
            return Err(Error::Conditioning(format!("M^T M eigenvalue ratio {:.3e} below {MIN_GRAM_RCOND:.0e}", lo / hi)));
        }
        Ok(Self { m: m.clone(), gram })
    }

    pub fn endmembers(&self) -> usize {
        self.m.ncols()
    }

    /// Abundances of a single pixel spectrum.
    pub fn solve(&self, y: &[f64]) -> DVector<f64> {
        let p = self.m.ncols();
        let b = self.m.tr_mul(&DVector::from_column_slice(y));
        if p == 1 {
            return DVector::from_element(1, 1.0);
        }
        let mut a = DVector::from_element(p, 1.0 / p as f64);
        let mut free = vec![true; p];
        for _ in 0..(50 * p + 50) {
            let idx: Vec<usize> = (0..p).filter(|&i| free[i]).collect();
            let (z, mu) = self.equality_qp(&idx, &b);
            if z.iter().all(|&v| v >= 0.0) {
                a.fill(0.0);
                for (k, &i) in idx.iter().enumerate() {
                    a[i] = z[k];
                }
                // Lagrangian: G a - b + mu 1 - lambda = 0
                let g = &self.gram * &a - &b;
                let worst = (0..p).filter(|&i| !free[i]).map(|i| (i, g[i] + mu)).min_by(|x, y| x.1.total_cmp(&y.1));
                match worst {
                    Some((i, lambda)) if lambda < -1e-14 * (1.0 + g.amax()) => free[i] = true,
                    _ => return a,
                }
            } else {
                // step towards z until the first free coordinate hits zero
                let mut alpha = 1.0f64;
                let mut block = None;
                for (k, &i) in idx.iter().enumerate() {
                    if z[k] < 0.0 {
                        let ratio = a[i] / (a[i] - z[k]);
                        if ratio < alpha {
                            alpha = ratio;
                            block = Some(i);
                        }
                    }
                }
                for (k, &i) in idx.iter().enumerate() {
                    a[i] += alpha * (z[k] - a[i]);
                }
                if let Some(i) = block {
                    a[i] = 0.0;
                    free[i] = false;
                }
                for &i in &idx {
                    if a[i] <= 0.0 {
                        a[i] = 0.0;
                        free[i] = false;
                    }
                }
            }
        }
        log::warn!("FCLS active set did not converge; returning last iterate");
        a
    }

    /// Minimiser of `1/2 z^T G_FF z - b_F^T z` subject to `1^T z = 1`, and its multiplier.
    fn equality_qp(&self, idx: &[usize], b: &DVector<f64>) -> (DVector<f64>, f64) {
        let k = idx.len();
        let g = DMatrix::from_fn(k, k, |r, c| self.gram[(idx[r], idx[c])]);
        let bf = DVector::from_fn(k, |r, _| b[idx[r]]);
        let chol = g.cholesky().expect("principal submatrix of a positive definite Gram matrix");
        let gi_b = chol.solve(&bf);
        let gi_1 = chol.solve(&DVector::from_element(k, 1.0));
        let mu = (gi_b.sum() - 1.0) / gi_1.sum();
        (gi_b - gi_1 * mu, mu)
    }
}

/// FCLS for a single pixel spectrum `y` against `m` (`L x P`).
pub fn fcls_pixel(y: &[f64], m: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(FclsSolver::new(m)?.solve(y))
}

/// FCLS for every column of `y` (`L x N`), returning the `P x N` abundance matrix.
pub fn fcls(y: &DMatrix<f64>, m: &DMatrix<f64>, exec: Exec) -> Result<DMatrix<f64>> {
    if y.nrows() != m.nrows() {
        return Err(Error::Shape(format!("data has {} bands, endmembers {}", y.nrows(), m.nrows())));
    }
    let solver = FclsSolver::new(m)?;
    let p = m.ncols();
    let n = y.ncols();
    let mut out = vec![0.0; p * n];
    const CHUNK: usize = 64;
    exec.for_each_chunk_mut(&mut out, CHUNK * p, |c, slot| {
        for (k, col) in slot.chunks_mut(p).enumerate() {
            let a = solver.solve(y.column(c * CHUNK + k).as_slice());
            col.copy_from_slice(a.as_slice());
        }
    });
    Ok(DMatrix::from_column_slice(p, n, &out))
}

/// Per-phase FCLS of a sequence, phase `t` against matrix `M_t`.
pub fn fcls_sequence(seq: &HyperCubeSequence, m: &EndmemberSet, exec: Exec) -> Result<AbundanceSequence> {
    if m.phases() != seq.phases() || m.bands() != seq.bands() {
        return Err(Error::Shape(format!(
            "endmembers are {}x{} (T x L), sequence {}x{}",
            m.phases(),
            m.bands(),
            seq.phases(),
            seq.bands()
        )));
    }
    let p = m.endmembers();
    let np = seq.pixels();
    let mut data = Vec::with_capacity(seq.phases() * p * np);
    for t in 0..seq.phases() {
        let a = fcls(&super::phase_matrix(seq, t), &super::endmember_matrix(m, t), exec)?;
        for r in 0..p {
            data.extend(a.row(r).iter().map(|&v| v as f32));
        }
    }
    AbundanceSequence::new(seq.phases(), p, seq.height(), seq.width(), data)
}

/// KKT residual of a candidate FCLS solution `a` for spectrum `y`.
///
/// With `g = M^T (M a - y)` and `g_min = min g`, optimality means every
/// coordinate has either `a_i = 0` or `g_i = g_min`; the residual combines
/// `min(a_i, g_i - g_min)` with sum-to-one and sign violations.
pub fn kkt_residual(y: &[f64], m: &DMatrix<f64>, a: &[f64]) -> f64 {
    let av = DVector::from_column_slice(a);
    let g = m.tr_mul(&(m * &av - DVector::from_column_slice(y)));
    let g_min = g.min();
    let comp = a.iter().zip(g.iter()).map(|(&ai, &gi)| ai.min(gi - g_min).abs()).fold(0.0, f64::max);
    let sum = (a.iter().sum::<f64>() - 1.0).abs();
    let neg = a.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max);
    comp.max(sum).max(neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_m(rng: &mut impl Rng, l: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(l, p, |_, _| rng.random_range(0.05..1.0))
    }

    #[test]
    fn pure_column_gives_one_hot() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let m = random_m(&mut rng, 6, 3);
        let a = fcls_pixel(m.column(0).as_slice(), &m).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-10 && a[1].abs() < 1e-10 && a[2].abs() < 1e-10, "{a}");
    }

    #[test]
    fn interior_half_half() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let m = random_m(&mut rng, 5, 2);
        let y: Vec<f64> = (0..5).map(|l| 0.5 * m[(l, 0)] + 0.5 * m[(l, 1)]).collect();
        let a = fcls_pixel(&y, &m).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-8 && (a[1] - 0.5).abs() < 1e-8);
        assert!(kkt_residual(&y, &m, a.as_slice()) < 1e-8);
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(FclsSolver::new(&m), Err(Error::Conditioning(_))));
    }

    #[test]
    fn outside_point_projects_to_face() {
        // y far outside the simplex cone on the side of m0
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let y = [2.0, -1.0, 0.5];
        let a = fcls_pixel(&y, &m).unwrap();
        assert!(a[1].abs() < 1e-12);
        assert!((a.sum() - 1.0).abs() < 1e-12);
        assert!(kkt_residual(&y, &m, a.as_slice()) < 1e-10);
    }

    #[test]
    fn batch_matches_single_and_exec_modes_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = random_m(&mut rng, 8, 4);
        let y = DMatrix::from_fn(8, 200, |_, _| rng.random_range(0.0..1.0));
        let seq = fcls(&y, &m, Exec::Sequential).unwrap();
        let par = fcls(&y, &m, Exec::Parallel).unwrap();
        assert_eq!(seq, par);
        let single = fcls_pixel(y.column(17).as_slice(), &m).unwrap();
        assert_eq!(seq.column(17), single);
    }

    proptest::proptest! {
        #[test]
        fn scale_invariance(seed in 0u64..500, s in 0.01f64..100.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = random_m(&mut rng, 7, 3);
            let y: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = fcls_pixel(&y, &m).unwrap();
            let ys: Vec<f64> = y.iter().map(|v| v * s).collect();
            let b = fcls_pixel(&ys, &(&m * s)).unwrap();
            for i in 0..3 {
                proptest::prop_assert!((a[i] - b[i]).abs() < 1e-8);
            }
        }

        #[test]
        fn kkt_holds_on_random_instances(seed in 0u64..500) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = rng.random_range(2..6);
            let m = random_m(&mut rng, p + 3, p);
            let y: Vec<f64> = (0..p + 3).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = fcls_pixel(&y, &m).unwrap();
            proptest::prop_assert!(kkt_residual(&y, &m, a.as_slice()) <= 1e-8);
        }
    }
}
