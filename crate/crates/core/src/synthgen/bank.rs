use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Named collections of reference spectra.
///
/// On disk this is JSON of the form `{"classes": {"water": [[...], ...], ...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectraBank {
    pub classes: BTreeMap<String, Vec<Vec<f64>>>,
}

/// Gaussian bump `(centre, width, amplitude)` on the unit wavelength axis.
type Bump = (f64, f64, f64);

struct ClassShape {
    name: &'static str,
    baseline: f64,
    bumps: &'static [Bump],
}

// Shapes loosely mimic the broad features of the named materials.
const SHAPES: &[ClassShape] = &[
    ClassShape { name: "water", baseline: 0.02, bumps: &[(0.06, 0.07, 0.07), (0.16, 0.05, 0.035), (0.28, 0.06, 0.012)] },
    ClassShape {
        name: "vegetation",
        baseline: 0.03,
        bumps: &[(0.10, 0.025, 0.07), (0.40, 0.09, 0.42), (0.58, 0.07, 0.30), (0.78, 0.05, 0.16), (0.92, 0.04, 0.08)],
    },
    ClassShape { name: "soil", baseline: 0.08, bumps: &[(0.30, 0.22, 0.22), (0.62, 0.16, 0.26), (0.88, 0.10, 0.14)] },
    ClassShape {
        name: "road",
        baseline: 0.14,
        bumps: &[(0.15, 0.20, 0.06), (0.50, 0.30, 0.05), (0.80, 0.15, 0.04), (0.95, 0.05, 0.03)],
    },
    ClassShape {
        name: "mineral",
        baseline: 0.25,
        bumps: &[(0.22, 0.10, 0.25), (0.45, 0.12, 0.30), (0.70, 0.06, 0.12), (0.85, 0.05, 0.18), (0.97, 0.03, 0.06)],
    },
    ClassShape {
        name: "concrete",
        baseline: 0.20,
        bumps: &[(0.05, 0.04, 0.05), (0.35, 0.08, 0.10), (0.55, 0.05, 0.14), (0.75, 0.10, 0.16), (0.90, 0.06, 0.04), (0.98, 0.02, 0.03)],
    },
];

const BUILTIN_VARIANTS: usize = 24;
const BUILTIN_SEED: u64 = 0x5eed_ba4c;

fn render(baseline: f64, bumps: &[Bump], bands: usize) -> Vec<f64> {
    (0..bands)
        .map(|l| {
            let x = if bands > 1 { l as f64 / (bands - 1) as f64 } else { 0.0 };
            baseline + bumps.iter().map(|&(c, w, a)| a * (-0.5 * ((x - c) / w).powi(2)).exp()).sum::<f64>()
        })
        .collect()
}

impl SpectraBank {
    /// Built-in bank of smooth synthetic signatures sampled at `bands` points.
    ///
    /// Every class holds 24 jittered variants of its base shape; the first
    /// variant is the unjittered base. Output depends only on `bands`.
    pub fn builtin(bands: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(BUILTIN_SEED);
        let mut classes = BTreeMap::new();
        for shape in SHAPES {
            let mut variants = vec![render(shape.baseline, shape.bumps, bands)];
            while variants.len() < BUILTIN_VARIANTS {
                let baseline = shape.baseline * rng.random_range(0.9..1.1);
                let bumps: Vec<Bump> = shape
                    .bumps
                    .iter()
                    .map(|&(c, w, a)| {
                        (c + rng.random_range(-0.015..0.015), w * rng.random_range(0.9..1.1), a * rng.random_range(0.8..1.2))
                    })
                    .collect();
                variants.push(render(baseline, &bumps, bands));
            }
            classes.insert(shape.name.to_string(), variants);
        }
        Self { classes }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bank: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(bank)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Checks that every spectrum has `bands` finite nonnegative entries and no class is empty.
    pub fn validate(&self, bands: usize) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Validation("spectra bank has no classes".into()));
        }
        for (name, spectra) in &self.classes {
            if spectra.is_empty() {
                return Err(Error::Validation(format!("bank class '{name}' is empty")));
            }
            for (i, s) in spectra.iter().enumerate() {
                if s.len() != bands {
                    return Err(Error::Validation(format!(
                        "bank class '{name}' spectrum {i} has {} bands, expected {bands}",
                        s.len()
                    )));
                }
                if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::Validation(format!("bank class '{name}' spectrum {i} has negative or non-finite values")));
                }
                if s.iter().all(|&v| v == 0.0) {
                    return Err(Error::Validation(format!("bank class '{name}' spectrum {i} is all zero")));
                }
            }
        }
        Ok(())
    }

    pub fn class(&self, name: &str) -> Result<&[Vec<f64>]> {
        match self.classes.get(name) {
            Some(s) if !s.is_empty() => Ok(s),
            Some(_) => Err(Error::Validation(format!("bank class '{name}' is empty"))),
            None => Err(Error::Validation(format!("bank has no class '{name}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_is_valid_and_deterministic() {
        let a = SpectraBank::builtin(224);
        a.validate(224).unwrap();
        assert_eq!(a, SpectraBank::builtin(224));
        assert!(a.classes.values().all(|v| v.len() >= 20));
        for name in ["water", "vegetation", "soil", "road"] {
            assert!(a.class(name).is_ok());
        }
    }

    #[test]
    fn builtin_classes_are_spectrally_distinct() {
        let bank = SpectraBank::builtin(198);
        let bases: Vec<&Vec<f64>> = bank.classes.values().map(|v| &v[0]).collect();
        for i in 0..bases.len() {
            for j in i + 1..bases.len() {
                let dot: f64 = bases[i].iter().zip(bases[j]).map(|(a, b)| a * b).sum();
                let na: f64 = bases[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb: f64 = bases[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!((dot / (na * nb)).acos() > 0.1, "classes {i} and {j} too similar");
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let bank = SpectraBank::builtin(8);
        let back: SpectraBank = serde_json::from_str(&bank.to_json().unwrap()).unwrap();
        assert_eq!(back.classes.len(), bank.classes.len());
        assert!(back.validate(8).is_ok());
    }
}
