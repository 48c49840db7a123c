//! Value types for multitemporal hyperspectral data.
//!
//! All containers store 32-bit floats (the on-disk precision) in row-major
//! order. Pixels are flattened as `n = row * width + col`.

mod io;

pub use io::{load_bundle, load_estimate, save_bundle, save_estimate};

use crate::{Error, Result};

/// Default tolerance for the abundance sum-to-one check.
pub const ASC_TOL: f64 = 1e-5;
/// Default slack for the abundance nonnegativity check.
pub const ANC_SLACK: f64 = 1e-7;

/// Observed image sequence, layout `[T][L][H][W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperCubeSequence {
    phases: usize,
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub wavelengths: Option<Vec<f64>>,
    pub phase_labels: Option<Vec<String>>,
}

impl HyperCubeSequence {
    pub fn new(phases: usize, bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if phases < 1 || bands < 2 || height < 1 || width < 1 {
            return Err(Error::Validation(format!(
                "cube dimensions T={phases} L={bands} H={height} W={width} out of range (need T>=1, L>=2, H,W>=1)"
            )));
        }
        let expected = phases * bands * height * width;
        if data.len() != expected {
            return Err(Error::Shape(format!("cube holds {} values, dims imply {expected}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite cube value at flat index {i}")));
        }
        Ok(Self { phases, bands, height, width, data, wavelengths: None, phase_labels: None })
    }

    /// Builds a cube from f64 values, rounding to storage precision.
    pub fn from_f64(phases: usize, bands: usize, height: usize, width: usize, data: &[f64]) -> Result<Self> {
        Self::new(phases, bands, height, width, data.iter().map(|&v| v as f32).collect())
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Band-sequential block of phase `t`, an `L x N` row-major matrix.
    pub fn phase(&self, t: usize) -> &[f32] {
        let len = self.bands * self.pixels();
        &self.data[t * len..(t + 1) * len]
    }

    /// Phase `t` as an `L x N` row-major f64 matrix.
    pub fn phase_f64(&self, t: usize) -> Vec<f64> {
        self.phase(t).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Spectrum of pixel `n` at phase `t`.
    pub fn spectrum(&self, t: usize, n: usize) -> Vec<f64> {
        let block = self.phase(t);
        let np = self.pixels();
        (0..self.bands).map(|l| f64::from(block[l * np + n])).collect()
    }

    /// Mean observed spectrum of every phase, `[T][L]`.
    pub fn phase_means(&self) -> Vec<Vec<f64>> {
        let np = self.pixels();
        (0..self.phases)
            .map(|t| {
                self.phase(t)
                    .chunks(np)
                    .map(|band| band.iter().map(|&v| f64::from(v)).sum::<f64>() / np as f64)
                    .collect()
            })
            .collect()
    }
}

/// Per-pixel endmember truth, layout `[T][H][W][L][P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerPixelEndmembers {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Endmember matrices `M_t` (layout `[T][L][P]`) with optional per-pixel variants.
#[derive(Clone, Debug, PartialEq)]
pub struct EndmemberSet {
    phases: usize,
    bands: usize,
    endmembers: usize,
    per_phase: Vec<f32>,
    per_pixel: Option<PerPixelEndmembers>,
}

impl EndmemberSet {
    pub fn new(phases: usize, bands: usize, endmembers: usize, per_phase: Vec<f32>) -> Result<Self> {
        if phases == 0 || bands == 0 || endmembers == 0 {
            return Err(Error::Validation("endmember set dimensions must be positive".into()));
        }
        if per_phase.len() != phases * bands * endmembers {
            return Err(Error::Shape(format!(
                "endmember data holds {} values, dims imply {}",
                per_phase.len(),
                phases * bands * endmembers
            )));
        }
        let set = Self { phases, bands, endmembers, per_phase, per_pixel: None };
        for t in 0..phases {
            check_columns(set.phase(t), bands, endmembers, || format!("phase {t}"))?;
        }
        Ok(set)
    }

    /// Builds a set from f64 matrices `[T][L*P]`, rounding to storage precision.
    pub fn from_f64(bands: usize, endmembers: usize, per_phase: &[Vec<f64>]) -> Result<Self> {
        let data = per_phase.iter().flat_map(|m| m.iter().map(|&v| v as f32)).collect();
        Self::new(per_phase.len(), bands, endmembers, data)
    }

    pub fn with_per_pixel(mut self, per_pixel: PerPixelEndmembers) -> Result<Self> {
        let n = per_pixel.height * per_pixel.width;
        let expected = self.phases * n * self.bands * self.endmembers;
        if per_pixel.data.len() != expected {
            return Err(Error::Shape(format!(
                "per-pixel endmember data holds {} values, dims imply {expected}",
                per_pixel.data.len()
            )));
        }
        let block = self.bands * self.endmembers;
        for (i, m) in per_pixel.data.chunks(block).enumerate() {
            check_columns(m, self.bands, self.endmembers, || format!("phase {} pixel {}", i / n, i % n))?;
        }
        self.per_pixel = Some(per_pixel);
        Ok(self)
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn endmembers(&self) -> usize {
        self.endmembers
    }

    pub fn per_phase_data(&self) -> &[f32] {
        &self.per_phase
    }

    pub fn per_pixel(&self) -> Option<&PerPixelEndmembers> {
        self.per_pixel.as_ref()
    }

    /// `L x P` row-major matrix of phase `t`.
    pub fn phase(&self, t: usize) -> &[f32] {
        let len = self.bands * self.endmembers;
        &self.per_phase[t * len..(t + 1) * len]
    }

    pub fn phase_f64(&self, t: usize) -> Vec<f64> {
        self.phase(t).iter().map(|&v| f64::from(v)).collect()
    }

    /// `L x P` matrix of pixel `n` at phase `t`, falling back to the phase matrix.
    pub fn pixel_f64(&self, t: usize, n: usize) -> Vec<f64> {
        match &self.per_pixel {
            Some(pp) => {
                let block = self.bands * self.endmembers;
                let np = pp.height * pp.width;
                let off = (t * np + n) * block;
                pp.data[off..off + block].iter().map(|&v| f64::from(v)).collect()
            }
            None => self.phase_f64(t),
        }
    }

    /// Endmember matrix averaged over phases, `L x P` row-major.
    pub fn temporal_mean(&self) -> Vec<f64> {
        let len = self.bands * self.endmembers;
        let mut out = vec![0.0; len];
        for t in 0..self.phases {
            for (o, &v) in out.iter_mut().zip(self.phase(t)) {
                *o += f64::from(v);
            }
        }
        out.iter_mut().for_each(|v| *v /= self.phases as f64);
        out
    }

    /// Copy with endmember columns reordered so that column `j` of the result is column `perm[j]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if !is_permutation(perm, self.endmembers) {
            return Err(Error::Validation(format!("{perm:?} is not a permutation of 0..{}", self.endmembers)));
        }
        let p = self.endmembers;
        let remap = |src: &[f32]| -> Vec<f32> {
            let mut out = vec![0.0; src.len()];
            for (row_out, row_in) in out.chunks_mut(p).zip(src.chunks(p)) {
                for (j, &k) in perm.iter().enumerate() {
                    row_out[j] = row_in[k];
                }
            }
            out
        };
        Ok(Self {
            phases: self.phases,
            bands: self.bands,
            endmembers: p,
            per_phase: remap(&self.per_phase),
            per_pixel: self.per_pixel.as_ref().map(|pp| PerPixelEndmembers {
                height: pp.height,
                width: pp.width,
                data: remap(&pp.data),
            }),
        })
    }
}

fn check_columns(m: &[f32], bands: usize, endmembers: usize, at: impl Fn() -> String) -> Result<()> {
    if let Some(i) = m.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(format!("endmember entry {} at {} is negative or non-finite", m[i], at())));
    }
    for p in 0..endmembers {
        if (0..bands).all(|l| m[l * endmembers + p] == 0.0) {
            return Err(Error::Validation(format!("endmember column {p} at {} has zero norm", at())));
        }
    }
    Ok(())
}

pub(crate) fn is_permutation(perm: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    perm.len() == n && perm.iter().all(|&k| k < n && !std::mem::replace(&mut seen[k], true))
}

/// Abundance maps, layout `[T][P][H][W]`.
///
/// Construction only checks shape and finiteness; use [`validate_abundance`]
/// for the nonnegativity and sum-to-one constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct AbundanceSequence {
    phases: usize,
    endmembers: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl AbundanceSequence {
    pub fn new(phases: usize, endmembers: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if phases == 0 || endmembers == 0 || height == 0 || width == 0 {
            return Err(Error::Validation("abundance dimensions must be positive".into()));
        }
        let expected = phases * endmembers * height * width;
        if data.len() != expected {
            return Err(Error::Shape(format!("abundance data holds {} values, dims imply {expected}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite abundance at flat index {i}")));
        }
        Ok(Self { phases, endmembers, height, width, data })
    }

    pub fn from_f64(phases: usize, endmembers: usize, height: usize, width: usize, data: &[f64]) -> Result<Self> {
        Self::new(phases, endmembers, height, width, data.iter().map(|&v| v as f32).collect())
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn endmembers(&self) -> usize {
        self.endmembers
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `P x N` row-major block of phase `t`.
    pub fn phase(&self, t: usize) -> &[f32] {
        let len = self.endmembers * self.pixels();
        &self.data[t * len..(t + 1) * len]
    }

    pub fn phase_f64(&self, t: usize) -> Vec<f64> {
        self.phase(t).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn get(&self, t: usize, p: usize, n: usize) -> f32 {
        self.data[(t * self.endmembers + p) * self.pixels() + n]
    }

    /// Copy whose endmember `j` is endmember `perm[j]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if !is_permutation(perm, self.endmembers) {
            return Err(Error::Validation(format!("{perm:?} is not a permutation of 0..{}", self.endmembers)));
        }
        let np = self.pixels();
        let mut data = Vec::with_capacity(self.data.len());
        for t in 0..self.phases {
            let block = self.phase(t);
            for &k in perm {
                data.extend_from_slice(&block[k * np..(k + 1) * np]);
            }
        }
        Ok(Self { data, ..*self })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    /// Some fraction is below `-tol`.
    Nonnegativity,
    /// The fractions of a pixel do not sum to one within `tol`.
    SumToOne,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Violation {
    pub phase: usize,
    pub pixel: usize,
    pub kind: ViolationKind,
    pub magnitude: f64,
}

/// Lists every (phase, pixel) breaking ANC or ASC at tolerance `tol`.
///
/// At most one violation of each kind is reported per pixel; the ANC
/// magnitude is that of the most negative fraction.
pub fn validate_abundance(a: &AbundanceSequence, tol: f64) -> Vec<Violation> {
    let np = a.pixels();
    let mut out = Vec::new();
    for t in 0..a.phases {
        let block = a.phase(t);
        for n in 0..np {
            let mut sum = 0.0f64;
            let mut min = f64::INFINITY;
            for p in 0..a.endmembers {
                let v = f64::from(block[p * np + n]);
                sum += v;
                min = min.min(v);
            }
            if min < -tol {
                out.push(Violation { phase: t, pixel: n, kind: ViolationKind::Nonnegativity, magnitude: -min });
            }
            let dev = (sum - 1.0).abs();
            if dev > tol {
                out.push(Violation { phase: t, pixel: n, kind: ViolationKind::SumToOne, magnitude: dev });
            }
        }
    }
    out
}

/// Observed data plus optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub observed: HyperCubeSequence,
    pub gt_endmembers: Option<EndmemberSet>,
    pub gt_abundances: Option<AbundanceSequence>,
    pub noise_snr_db: Option<f64>,
    pub seed: Option<u64>,
}

impl DatasetBundle {
    pub fn new(observed: HyperCubeSequence) -> Self {
        Self { observed, gt_endmembers: None, gt_abundances: None, noise_snr_db: None, seed: None }
    }

    /// Endmember count declared by whichever ground truth is present.
    pub fn endmembers(&self) -> Option<usize> {
        self.gt_endmembers
            .as_ref()
            .map(EndmemberSet::endmembers)
            .or_else(|| self.gt_abundances.as_ref().map(AbundanceSequence::endmembers))
    }

    /// Checks that ground-truth dimensions agree with the observed cube and each other.
    pub fn validate(&self) -> Result<()> {
        let y = &self.observed;
        if let Some(m) = &self.gt_endmembers {
            if m.phases() != y.phases() || m.bands() != y.bands() {
                return Err(Error::Shape(format!(
                    "gt endmembers are {}x{} (T x L), observed is {}x{}",
                    m.phases(),
                    m.bands(),
                    y.phases(),
                    y.bands()
                )));
            }
            if let Some(pp) = m.per_pixel() {
                if pp.height != y.height() || pp.width != y.width() {
                    return Err(Error::Shape("per-pixel endmember grid differs from observed image".into()));
                }
            }
        }
        if let Some(a) = &self.gt_abundances {
            if a.phases() != y.phases() || a.height() != y.height() || a.width() != y.width() {
                return Err(Error::Shape("gt abundance dims differ from observed cube".into()));
            }
        }
        if let (Some(m), Some(a)) = (&self.gt_endmembers, &self.gt_abundances) {
            if m.endmembers() != a.endmembers() {
                return Err(Error::Shape(format!(
                    "gt endmembers have P={}, gt abundances P={}",
                    m.endmembers(),
                    a.endmembers()
                )));
            }
        }
        if let Some(w) = &y.wavelengths {
            if w.len() != y.bands() {
                return Err(Error::Shape(format!("{} wavelengths for {} bands", w.len(), y.bands())));
            }
        }
        if let Some(p) = &y.phase_labels {
            if p.len() != y.phases() {
                return Err(Error::Shape(format!("{} phase labels for {} phases", p.len(), y.phases())));
            }
        }
        Ok(())
    }
}
