//! Evaluation metrics with endmember permutation alignment.
//!
//! Unmixing recovers endmembers only up to a permutation, so estimates are
//! first matched to the truth by minimum total spectral angle between the
//! temporally averaged endmember matrices. `perm[i] = j` means estimated
//! endmember `i` plays the role of true endmember `j`.
//!
//! NRMSE_A and NRMSE_Y normalise each phase by the Frobenius norm of the whole
//! phase (abundance matrix or observed image) rather than pixel by pixel.

mod assignment;

pub use assignment::min_cost_assignment;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{is_permutation, AbundanceSequence, DatasetBundle, EndmemberSet, HyperCubeSequence};
use crate::{Error, Result};

/// Where the endmember truth used for NRMSE_M / SAM_M came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndmemberTruth {
    PerPixel,
    /// No per-pixel truth; the per-phase matrices were broadcast over pixels.
    PerPhase,
    Absent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nrmse_a: Option<f64>,
    pub nrmse_m: Option<f64>,
    pub sam_m: Option<f64>,
    pub nrmse_y: f64,
    pub runtime_s: f64,
    pub permutation: Vec<usize>,
    pub endmember_truth: EndmemberTruth,
}

/// Spectral angle between two vectors, cosine clamped to `[-1, 1]`.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0).acos())
}

fn column(m: &[f64], bands: usize, p_n: usize, p: usize) -> Vec<f64> {
    (0..bands).map(|l| m[l * p_n + p]).collect()
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &j) in perm.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

fn check_perm(perm: &[usize], p: usize) -> Result<()> {
    if !is_permutation(perm, p) {
        return Err(Error::Validation(format!("{perm:?} is not a permutation of 0..{p}")));
    }
    Ok(())
}

/// Matches estimated to true endmembers by minimum total SAD of the temporal-mean spectra.
pub fn align_endmembers(est: &EndmemberSet, truth: &EndmemberSet) -> Result<Vec<usize>> {
    if est.endmembers() != truth.endmembers() || est.bands() != truth.bands() {
        return Err(Error::Shape(format!(
            "estimate has L={} P={}, truth L={} P={}",
            est.bands(),
            est.endmembers(),
            truth.bands(),
            truth.endmembers()
        )));
    }
    let (l, p) = (est.bands(), est.endmembers());
    let (me, mt) = (est.temporal_mean(), truth.temporal_mean());
    let cost: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let e = column(&me, l, p, i);
            (0..p)
                .map(|j| spectral_angle(&e, &column(&mt, l, p, j)).unwrap_or(std::f64::consts::PI))
                .collect()
        })
        .collect();
    Ok(min_cost_assignment(&cost))
}

/// Matches endmembers by minimum total squared abundance difference (used when no endmember truth exists).
pub fn align_abundances(est: &AbundanceSequence, truth: &AbundanceSequence) -> Result<Vec<usize>> {
    check_abundance_shapes(est, truth)?;
    let p = est.endmembers();
    let np = est.pixels();
    let cost: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            (0..p)
                .map(|j| {
                    (0..est.phases())
                        .map(|t| {
                            let (e, g) = (est.phase(t), truth.phase(t));
                            (0..np).map(|n| (f64::from(e[i * np + n]) - f64::from(g[j * np + n])).powi(2)).sum::<f64>()
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(min_cost_assignment(&cost))
}

fn check_abundance_shapes(est: &AbundanceSequence, truth: &AbundanceSequence) -> Result<()> {
    if (est.phases(), est.endmembers(), est.height(), est.width())
        != (truth.phases(), truth.endmembers(), truth.height(), truth.width())
    {
        return Err(Error::Shape("estimated and true abundances differ in shape".into()));
    }
    Ok(())
}

/// `sqrt((1/T) sum_t sum_n ||a_nt - a^_nt||^2 / ||A_t||_F^2)` after aligning the estimate by `perm`.
pub fn nrmse_a(est: &AbundanceSequence, truth: &AbundanceSequence, perm: &[usize]) -> Result<f64> {
    check_abundance_shapes(est, truth)?;
    check_perm(perm, est.endmembers())?;
    let inv = inverse(perm);
    let p = est.endmembers();
    let np = est.pixels();
    let mut acc = 0.0;
    for t in 0..est.phases() {
        let (e, g) = (est.phase(t), truth.phase(t));
        let mut err = 0.0;
        let mut norm = 0.0;
        for j in 0..p {
            let i = inv[j];
            for n in 0..np {
                let gt = f64::from(g[j * np + n]);
                err += (gt - f64::from(e[i * np + n])).powi(2);
                norm += gt * gt;
            }
        }
        if norm == 0.0 {
            return Err(Error::Validation(format!("true abundances of phase {t} are all zero")));
        }
        acc += err / norm;
    }
    Ok((acc / est.phases() as f64).sqrt())
}

/// `sqrt((1/NT) sum_{n,t} ||M_nt - M^_nt||_F^2 / ||M_nt||_F^2)`; per-pixel truth is used when present.
pub fn nrmse_m(est: &EndmemberSet, truth: &EndmemberSet, perm: &[usize]) -> Result<f64> {
    check_endmember_shapes(est, truth)?;
    check_perm(perm, est.endmembers())?;
    let aligned = est.permuted(&inverse(perm))?;
    let np = truth.per_pixel().map_or(1, |pp| pp.height * pp.width);
    let mut acc = 0.0;
    for t in 0..truth.phases() {
        let e_phase = aligned.per_pixel().is_none().then(|| aligned.phase_f64(t));
        for n in 0..np {
            let g = truth.pixel_f64(t, n);
            let e = match &e_phase {
                Some(e) => std::borrow::Cow::Borrowed(e),
                None => std::borrow::Cow::Owned(aligned.pixel_f64(t, n)),
            };
            let norm: f64 = g.iter().map(|v| v * v).sum();
            if norm == 0.0 {
                return Err(Error::Validation(format!("true endmembers at phase {t} pixel {n} are zero")));
            }
            let err: f64 = g.iter().zip(e.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            acc += err / norm;
        }
    }
    Ok((acc / (np * truth.phases()) as f64).sqrt())
}

/// Mean spectral angle over phases, pixels and endmembers.
pub fn sam_m(est: &EndmemberSet, truth: &EndmemberSet, perm: &[usize]) -> Result<f64> {
    check_endmember_shapes(est, truth)?;
    check_perm(perm, est.endmembers())?;
    let aligned = est.permuted(&inverse(perm))?;
    let (l, p) = (truth.bands(), truth.endmembers());
    let np = truth.per_pixel().map_or(1, |pp| pp.height * pp.width);
    let mut acc = 0.0;
    for t in 0..truth.phases() {
        let e_phase = aligned.phase_f64(t);
        let e_cols: Vec<Vec<f64>> = (0..p).map(|j| column(&e_phase, l, p, j)).collect();
        for n in 0..np {
            let g = truth.pixel_f64(t, n);
            for j in 0..p {
                let e_col = if aligned.per_pixel().is_some() {
                    column(&aligned.pixel_f64(t, n), l, p, j)
                } else {
                    e_cols[j].clone()
                };
                acc += spectral_angle(&column(&g, l, p, j), &e_col)
                    .ok_or_else(|| Error::Validation(format!("zero-norm endmember column {j} at phase {t} pixel {n}")))?;
            }
        }
    }
    Ok(acc / (truth.phases() * np * p) as f64)
}

fn check_endmember_shapes(est: &EndmemberSet, truth: &EndmemberSet) -> Result<()> {
    if (est.phases(), est.bands(), est.endmembers()) != (truth.phases(), truth.bands(), truth.endmembers()) {
        return Err(Error::Shape("estimated and true endmember sets differ in shape".into()));
    }
    Ok(())
}

/// Reconstruction error of `M^_t A^_t` against the observed cube, normalised per phase.
pub fn nrmse_y(y: &HyperCubeSequence, est_m: &EndmemberSet, est_a: &AbundanceSequence) -> Result<f64> {
    if est_m.phases() != y.phases() || est_m.bands() != y.bands() || est_a.phases() != y.phases() || est_a.pixels() != y.pixels()
    {
        return Err(Error::Shape("estimate does not match observed cube".into()));
    }
    if est_m.endmembers() != est_a.endmembers() {
        return Err(Error::Shape("estimated endmembers and abundances disagree on P".into()));
    }
    let (l, p, np) = (y.bands(), est_a.endmembers(), y.pixels());
    let mut acc = 0.0;
    for t in 0..y.phases() {
        let obs = y.phase(t);
        let a = est_a.phase(t);
        let mut err = 0.0;
        let mut norm = 0.0;
        let m_phase = est_m.phase_f64(t);
        for n in 0..np {
            let m_owned;
            let m: &[f64] = if est_m.per_pixel().is_some() {
                m_owned = est_m.pixel_f64(t, n);
                &m_owned
            } else {
                &m_phase
            };
            for band in 0..l {
                let recon: f64 = (0..p).map(|k| m[band * p + k] * f64::from(a[k * np + n])).sum();
                let o = f64::from(obs[band * np + n]);
                err += (o - recon).powi(2);
                norm += o * o;
            }
        }
        if norm == 0.0 {
            return Err(Error::Validation(format!("observed phase {t} is all zero")));
        }
        acc += err / norm;
    }
    Ok((acc / y.phases() as f64).sqrt())
}

/// Aligns the estimate to whatever ground truth `bundle` carries and computes every available metric.
pub fn evaluate(
    bundle: &DatasetBundle,
    est_a: &AbundanceSequence,
    est_m: &EndmemberSet,
    runtime_s: f64,
) -> Result<MetricsReport> {
    let p = est_m.endmembers();
    let permutation = match (&bundle.gt_endmembers, &bundle.gt_abundances) {
        (Some(m), _) => align_endmembers(est_m, m)?,
        (None, Some(a)) => align_abundances(est_a, a)?,
        (None, None) => (0..p).collect(),
    };
    let nrmse_a = bundle.gt_abundances.as_ref().map(|a| nrmse_a(est_a, a, &permutation)).transpose()?;
    let (nrmse_m, sam_m, endmember_truth) = match &bundle.gt_endmembers {
        Some(m) => (
            Some(nrmse_m(est_m, m, &permutation)?),
            Some(sam_m(est_m, m, &permutation)?),
            if m.per_pixel().is_some() { EndmemberTruth::PerPixel } else { EndmemberTruth::PerPhase },
        ),
        None => (None, None, EndmemberTruth::Absent),
    };
    Ok(MetricsReport {
        nrmse_a,
        nrmse_m,
        sam_m,
        nrmse_y: nrmse_y(&bundle.observed, est_m, est_a)?,
        runtime_s,
        permutation,
        endmember_truth,
    })
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub report: MetricsReport,
}

pub const METRICS_CSV_HEADER: &str = "method,dataset,seed,nrmse_a,nrmse_m,sam_m,nrmse_y,runtime_s";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders rows as `metrics.csv` text; missing metrics are left empty.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.dataset,
            r.seed,
            opt(m.nrmse_a),
            opt(m.nrmse_m),
            opt(m.sam_m),
            m.nrmse_y,
            m.runtime_s
        );
    }
    s
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Parses `metrics.csv` text back into `(method, dataset, seed, [nrmse_a, nrmse_m, sam_m, nrmse_y, runtime_s])`.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, String, u64, [Option<f64>; 5])>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_CSV_HEADER) {
        return Err(Error::Validation("metrics.csv header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Validation(format!("metrics.csv row has {} fields: {line}", f.len())));
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| Error::Validation(format!("bad number '{s}'")))
                }
            };
            let seed = f[2].parse().map_err(|_| Error::Validation(format!("bad seed '{}'", f[2])))?;
            Ok((f[0].to_string(), f[1].to_string(), seed, [num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?, num(f[7])?]))
        })
        .collect()
}
