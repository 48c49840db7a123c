//! Seeded synthetic multitemporal benchmarks.
//!
//! Two recipes are provided. [`generate_synthetic1`] mixes three reference
//! spectra with per-pixel piecewise-linear scaling, smooth drifting abundance
//! fields and disk-shaped abrupt changes. [`generate_synthetic2`] draws every
//! pixel's endmembers from per-class banks of pure spectra over 15 phases.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, purpose,
//! index)`, so per-phase work can run in parallel without changing output.

mod bank;
mod fields;

pub use bank::SpectraBank;
pub use fields::{gaussian_blur, smooth_field, standardize};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{AbundanceSequence, DatasetBundle, EndmemberSet, HyperCubeSequence, PerPixelEndmembers};
use crate::exec::Exec;
use crate::{Error, Result};

#[derive(Clone, Copy)]
#[repr(u64)]
enum Purpose {
    References = 1,
    Fields = 2,
    Mutation = 3,
    Scaling = 4,
    Noise = 5,
    BankDraw = 6,
}

/// Independent random stream for `(seed, purpose, index)`.
fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | index);
    rng
}

/// Shared knobs for the smooth abundance fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    /// Std (pixels) of the Gaussian smoothing kernel.
    pub smoothing_px: f64,
    /// Multiplier applied to the standardised fields before the softmax.
    pub logit_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { smoothing_px: 5.0, logit_scale: 2.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Synth1Config {
    pub phases: usize,
    pub height: usize,
    pub width: usize,
    pub endmembers: usize,
    pub bands: usize,
    pub scale_amplitude: (f64, f64),
    pub scale_knots: usize,
    /// 1-based phase indices that receive a local abrupt change.
    pub mutation_phases: Vec<usize>,
    pub mutation_radius_px: usize,
    /// `None` (or +inf) disables noise.
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub fields: FieldConfig,
    #[serde(skip)]
    pub bank: Option<SpectraBank>,
}

impl Default for Synth1Config {
    fn default() -> Self {
        Self {
            phases: 6,
            height: 50,
            width: 50,
            endmembers: 3,
            bands: 224,
            scale_amplitude: (0.85, 1.15),
            scale_knots: 5,
            mutation_phases: vec![2, 3, 4, 5],
            mutation_radius_px: 6,
            snr_db: Some(30.0),
            seed: 0,
            fields: FieldConfig::default(),
            bank: None,
        }
    }
}

impl Synth1Config {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_amplitude;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(Error::Config(format!("scale amplitude [{lo}, {hi}] must be positive and contain 1")));
        }
        if self.scale_knots < 2 {
            return Err(Error::Config("scale_knots must be at least 2".into()));
        }
        if let Some(&bad) = self.mutation_phases.iter().find(|&&t| t < 1 || t > self.phases) {
            return Err(Error::Config(format!("mutation phase {bad} outside 1..={}", self.phases)));
        }
        check_dims(self.phases, self.height, self.width, self.bands, self.endmembers)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Synth2Config {
    pub phases: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Bank class of each endmember, in endmember order.
    pub classes: Vec<String>,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub fields: FieldConfig,
    #[serde(skip)]
    pub bank: Option<SpectraBank>,
}

impl Default for Synth2Config {
    fn default() -> Self {
        Self {
            phases: 15,
            height: 50,
            width: 50,
            bands: 198,
            classes: ["water", "vegetation", "soil", "road"].map(String::from).to_vec(),
            snr_db: Some(30.0),
            seed: 0,
            fields: FieldConfig::default(),
            bank: None,
        }
    }
}

impl Synth2Config {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.phases, self.height, self.width, self.bands, self.classes.len())
    }
}

fn check_dims(t: usize, h: usize, w: usize, l: usize, p: usize) -> Result<()> {
    if t < 1 || h < 1 || w < 1 || l < 2 || p < 1 {
        return Err(Error::Config(format!("invalid dims T={t} H={h} W={w} L={l} P={p}")));
    }
    Ok(())
}

/// Random piecewise-linear curve over `bands` samples.
///
/// `knots` breakpoints are spread uniformly over the band axis with values
/// drawn i.i.d. from `amplitude`; bands in between are linearly interpolated.
pub fn piecewise_scaling<R: Rng + ?Sized>(bands: usize, amplitude: (f64, f64), knots: usize, rng: &mut R) -> Result<Vec<f64>> {
    if knots < 2 {
        return Err(Error::Config(format!("piecewise scaling needs at least 2 knots, got {knots}")));
    }
    let (lo, hi) = amplitude;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::Config(format!("invalid amplitude interval [{lo}, {hi}]")));
    }
    let values: Vec<f64> = (0..knots).map(|_| rng.random_range(lo..=hi)).collect();
    if bands == 1 {
        return Ok(vec![values[0]]);
    }
    let span = (bands - 1) as f64 / (knots - 1) as f64;
    Ok((0..bands)
        .map(|i| {
            let x = i as f64 / span;
            let k = (x.floor() as usize).min(knots - 2);
            let frac = x - k as f64;
            (values[k] + (values[k + 1] - values[k]) * frac).clamp(lo, hi)
        })
        .collect())
}

/// Adds i.i.d. zero-mean Gaussian noise at the given global SNR.
///
/// The signal power is the mean square over the whole sequence. Phase `t`
/// draws from its own stream of `seed`, so output does not depend on `exec`.
/// An infinite `snr_db` returns the input unchanged.
pub fn add_noise_snr(cube: &HyperCubeSequence, snr_db: f64, seed: u64, exec: Exec) -> Result<HyperCubeSequence> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(cube.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("invalid SNR {snr_db} dB")));
    }
    let power = cube.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / cube.data().len() as f64;
    if power <= 0.0 {
        return Err(Error::Degenerate("cannot calibrate noise on an all-zero cube".into()));
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let block = cube.bands() * cube.pixels();
    let mut data = cube.data().to_vec();
    exec.for_each_chunk_mut(&mut data, block, |t, chunk| {
        let mut rng = stream(seed, Purpose::Noise, t as u64);
        for v in chunk.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = (f64::from(*v) + sigma * e) as f32;
        }
    });
    let mut out = HyperCubeSequence::new(cube.phases(), cube.bands(), cube.height(), cube.width(), data)?;
    out.wavelengths = cube.wavelengths.clone();
    out.phase_labels = cube.phase_labels.clone();
    Ok(out)
}

/// Measured SNR (dB) of `noisy` relative to the clean `signal`.
pub fn measured_snr_db(signal: &HyperCubeSequence, noisy: &HyperCubeSequence) -> f64 {
    let (mut ps, mut pn) = (0.0f64, 0.0f64);
    for (&s, &y) in signal.data().iter().zip(noisy.data()) {
        ps += f64::from(s).powi(2);
        pn += (f64::from(y) - f64::from(s)).powi(2);
    }
    10.0 * (ps / pn).log10()
}

/// Softmax over endmembers of drifting smooth fields, layout `[T][P][N]`.
fn drifting_abundances(seed: u64, t_n: usize, p_n: usize, h: usize, w: usize, cfg: &FieldConfig) -> Vec<f64> {
    let np = h * w;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..p_n)
        .map(|p| {
            let mut r0 = stream(seed, Purpose::Fields, 2 * p as u64);
            let mut r1 = stream(seed, Purpose::Fields, 2 * p as u64 + 1);
            (smooth_field(h, w, cfg.smoothing_px, &mut r0), smooth_field(h, w, cfg.smoothing_px, &mut r1))
        })
        .collect();
    let mut out = vec![0.0; t_n * p_n * np];
    let mut logits = vec![0.0; p_n * np];
    for t in 0..t_n {
        let s = if t_n > 1 { t as f64 / (t_n - 1) as f64 } else { 0.0 };
        for (p, (f0, f1)) in pairs.iter().enumerate() {
            let field = &mut logits[p * np..(p + 1) * np];
            for n in 0..np {
                field[n] = (1.0 - s) * f0[n] + s * f1[n];
            }
            standardize(field);
            field.iter_mut().for_each(|v| *v *= cfg.logit_scale);
        }
        let block = &mut out[t * p_n * np..(t + 1) * p_n * np];
        for n in 0..np {
            let m = (0..p_n).map(|p| logits[p * np + n]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..p_n).map(|p| (logits[p * np + n] - m).exp()).sum();
            for p in 0..p_n {
                block[p * np + n] = (logits[p * np + n] - m).exp() / z;
            }
        }
    }
    out
}

/// Mixes per-pixel endmembers `[T][N][L][P]` with abundances `[T][P][N]` into `[T][L][N]`.
fn mix(m: &[f32], a: &[f32], t_n: usize, l_n: usize, p_n: usize, np: usize, exec: Exec) -> Vec<f32> {
    let mut y = vec![0.0f32; t_n * l_n * np];
    exec.for_each_chunk_mut(&mut y, l_n * np, |t, yt| {
        for n in 0..np {
            let mm = &m[(t * np + n) * l_n * p_n..(t * np + n + 1) * l_n * p_n];
            for l in 0..l_n {
                let mut acc = 0.0f64;
                for p in 0..p_n {
                    acc += f64::from(mm[l * p_n + p]) * f64::from(a[(t * p_n + p) * np + n]);
                }
                yt[l * np + n] = acc as f32;
            }
        }
    });
    y
}

/// Per-phase mean over pixels of per-pixel endmembers, `[T][L*P]`.
fn pixel_means(m: &[f32], t_n: usize, np: usize, block: usize) -> Vec<Vec<f64>> {
    (0..t_n)
        .map(|t| {
            let mut acc = vec![0.0f64; block];
            for n in 0..np {
                let mm = &m[(t * np + n) * block..(t * np + n + 1) * block];
                for (a, &v) in acc.iter_mut().zip(mm) {
                    *a += f64::from(v);
                }
            }
            acc.iter_mut().for_each(|v| *v /= np as f64);
            acc
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    seed: u64,
    snr_db: Option<f64>,
    t_n: usize,
    l_n: usize,
    p_n: usize,
    h: usize,
    w: usize,
    per_pixel: Vec<f32>,
    abundances: Vec<f32>,
    exec: Exec,
) -> Result<DatasetBundle> {
    let np = h * w;
    let clean = HyperCubeSequence::new(t_n, l_n, h, w, mix(&per_pixel, &abundances, t_n, l_n, p_n, np, exec))?;
    let snr = snr_db.filter(|s| s.is_finite());
    let observed = match snr {
        Some(s) => add_noise_snr(&clean, s, seed, exec)?,
        None => clean,
    };
    let means = pixel_means(&per_pixel, t_n, np, l_n * p_n);
    let gt_m = EndmemberSet::from_f64(l_n, p_n, &means)?.with_per_pixel(PerPixelEndmembers {
        height: h,
        width: w,
        data: per_pixel,
    })?;
    Ok(DatasetBundle {
        observed,
        gt_endmembers: Some(gt_m),
        gt_abundances: Some(AbundanceSequence::new(t_n, p_n, h, w, abundances)?),
        noise_snr_db: snr,
        seed: Some(seed),
    })
}

/// First synthetic benchmark: reference spectra with per-pixel piecewise-linear
/// variability, drifting abundance fields and local abrupt changes.
pub fn generate_synthetic1(cfg: &Synth1Config, exec: Exec) -> Result<DatasetBundle> {
    cfg.validate()?;
    let (t_n, l_n, p_n, h, w) = (cfg.phases, cfg.bands, cfg.endmembers, cfg.height, cfg.width);
    let np = h * w;
    let builtin;
    let bank = match &cfg.bank {
        Some(b) => b,
        None => {
            builtin = SpectraBank::builtin(l_n);
            &builtin
        }
    };
    bank.validate(l_n)?;
    if bank.classes.len() < p_n {
        return Err(Error::Config(format!("bank has {} classes, need {p_n} distinct references", bank.classes.len())));
    }

    let mut rng = stream(cfg.seed, Purpose::References, 0);
    let mut names: Vec<&String> = bank.classes.keys().collect();
    names.shuffle(&mut rng);
    let refs: Vec<&Vec<f64>> = names[..p_n]
        .iter()
        .map(|name| {
            let spectra = &bank.classes[*name];
            &spectra[rng.random_range(0..spectra.len())]
        })
        .collect();

    let mut a = drifting_abundances(cfg.seed, t_n, p_n, h, w, &cfg.fields);
    for &phase in &cfg.mutation_phases {
        let t = phase - 1;
        let mut rng = stream(cfg.seed, Purpose::Mutation, t as u64);
        let (cr, cc) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
        let k = rng.random_range(0..p_n);
        let r2 = (cfg.mutation_radius_px as f64).powi(2);
        let rest = if p_n > 1 { 0.1 / (p_n - 1) as f64 } else { 0.0 };
        let dominant = if p_n > 1 { 0.9 } else { 1.0 };
        for row in 0..h {
            for col in 0..w {
                if (row as f64 - cr).powi(2) + (col as f64 - cc).powi(2) <= r2 {
                    let n = row * w + col;
                    for p in 0..p_n {
                        a[(t * p_n + p) * np + n] = if p == k { dominant } else { rest };
                    }
                }
            }
        }
    }
    let abundances: Vec<f32> = a.iter().map(|&v| v as f32).collect();

    let block = l_n * p_n;
    let mut per_pixel = vec![0.0f32; t_n * np * block];
    let amplitude = cfg.scale_amplitude;
    let knots = cfg.scale_knots;
    exec.for_each_chunk_mut(&mut per_pixel, np * block, |t, chunk| {
        let mut rng = stream(cfg.seed, Purpose::Scaling, t as u64);
        for n in 0..np {
            let mm = &mut chunk[n * block..(n + 1) * block];
            for (p, reference) in refs.iter().enumerate() {
                let s = piecewise_scaling(l_n, amplitude, knots, &mut rng).expect("validated config");
                for l in 0..l_n {
                    mm[l * p_n + p] = (reference[l] * s[l]) as f32;
                }
            }
        }
    });

    assemble(cfg.seed, cfg.snr_db, t_n, l_n, p_n, h, w, per_pixel, abundances, exec)
}

/// Second synthetic benchmark: every pixel and phase draws each endmember
/// uniformly from the bank of its class.
pub fn generate_synthetic2(cfg: &Synth2Config, exec: Exec) -> Result<DatasetBundle> {
    cfg.validate()?;
    let (t_n, l_n, h, w) = (cfg.phases, cfg.bands, cfg.height, cfg.width);
    let p_n = cfg.classes.len();
    let np = h * w;
    let builtin;
    let bank = match &cfg.bank {
        Some(b) => b,
        None => {
            builtin = SpectraBank::builtin(l_n);
            &builtin
        }
    };
    bank.validate(l_n)?;
    let class_spectra: Vec<&[Vec<f64>]> = cfg.classes.iter().map(|c| bank.class(c)).collect::<Result<_>>()?;

    let a = drifting_abundances(cfg.seed, t_n, p_n, h, w, &cfg.fields);
    let abundances: Vec<f32> = a.iter().map(|&v| v as f32).collect();

    let block = l_n * p_n;
    let mut per_pixel = vec![0.0f32; t_n * np * block];
    exec.for_each_chunk_mut(&mut per_pixel, np * block, |t, chunk| {
        let mut rng = stream(cfg.seed, Purpose::BankDraw, t as u64);
        for n in 0..np {
            let mm = &mut chunk[n * block..(n + 1) * block];
            for (p, spectra) in class_spectra.iter().enumerate() {
                let s = &spectra[rng.random_range(0..spectra.len())];
                for l in 0..l_n {
                    mm[l * p_n + p] = s[l] as f32;
                }
            }
        }
    });

    assemble(cfg.seed, cfg.snr_db, t_n, l_n, p_n, h, w, per_pixel, abundances, exec)
}
