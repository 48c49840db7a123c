//! Dataset directory format.
//!
//! ```text
//! meta.json                  dims, flags, optional wavelengths / labels
//! phase_{t:02}.f32           [L][H][W]
//! gt_endmembers_{t:02}.f32   [L][P]
//! gt_abundance_{t:02}.f32    [P][H][W]
//! gt_endmembers_px_{t:02}.f32 [H][W][L][P]
//! ```
//!
//! All rasters are little-endian IEEE-754 binary32 with no header.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AbundanceSequence, DatasetBundle, EndmemberSet, HyperCubeSequence, PerPixelEndmembers};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    #[serde(rename = "T")]
    phases: usize,
    #[serde(rename = "L")]
    bands: usize,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    endmembers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "is_false")]
    has_gt_endmembers: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    has_gt_abundances: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    has_per_pixel_endmembers: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wavelengths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phase_labels: Option<Vec<String>>,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Writes `bundle` into directory `dir`, creating it if needed.
pub fn save_bundle(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let y = &bundle.observed;
    let gt_m = bundle.gt_endmembers.as_ref();
    let meta = Meta {
        phases: y.phases(),
        bands: y.bands(),
        height: y.height(),
        width: y.width(),
        endmembers: bundle.endmembers(),
        noise_snr_db: bundle.noise_snr_db.filter(|v| v.is_finite()),
        seed: bundle.seed,
        has_gt_endmembers: gt_m.is_some(),
        has_gt_abundances: bundle.gt_abundances.is_some(),
        has_per_pixel_endmembers: gt_m.and_then(EndmemberSet::per_pixel).is_some(),
        wavelengths: y.wavelengths.clone(),
        phase_labels: y.phase_labels.clone(),
    };
    let meta_path = dir.join("meta.json");
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

    for t in 0..y.phases() {
        write_f32(&dir.join(format!("phase_{t:02}.f32")), y.phase(t))?;
    }
    if let Some(m) = gt_m {
        for t in 0..m.phases() {
            write_f32(&dir.join(format!("gt_endmembers_{t:02}.f32")), m.phase(t))?;
        }
        if let Some(pp) = m.per_pixel() {
            let block = pp.height * pp.width * m.bands() * m.endmembers();
            for (t, chunk) in pp.data.chunks(block).enumerate() {
                write_f32(&dir.join(format!("gt_endmembers_px_{t:02}.f32")), chunk)?;
            }
        }
    }
    if let Some(a) = &bundle.gt_abundances {
        for t in 0..a.phases() {
            write_f32(&dir.join(format!("gt_abundance_{t:02}.f32")), a.phase(t))?;
        }
    }
    Ok(())
}

/// Reads a bundle written by [`save_bundle`] (or assembled by hand in the same layout).
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::format(&meta_path, format!("cannot read: {e}")))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let (t_n, l, h, w) = (meta.phases, meta.bands, meta.height, meta.width);
    let np = h * w;

    let mut data = Vec::with_capacity(t_n * l * np);
    for t in 0..t_n {
        data.extend(read_f32(&dir.join(format!("phase_{t:02}.f32")), l * np)?);
    }
    let mut observed = HyperCubeSequence::new(t_n, l, h, w, data)?;
    observed.wavelengths = meta.wavelengths;
    observed.phase_labels = meta.phase_labels;

    let need_p = |what: &str| {
        meta.endmembers
            .ok_or_else(|| Error::format(&meta_path, format!("{what} declared but P is missing")))
    };

    let gt_endmembers = if meta.has_gt_endmembers {
        let p = need_p("gt endmembers")?;
        let mut per_phase = Vec::with_capacity(t_n * l * p);
        for t in 0..t_n {
            per_phase.extend(read_f32(&dir.join(format!("gt_endmembers_{t:02}.f32")), l * p)?);
        }
        let mut set = EndmemberSet::new(t_n, l, p, per_phase)?;
        if meta.has_per_pixel_endmembers {
            let mut px = Vec::with_capacity(t_n * np * l * p);
            for t in 0..t_n {
                px.extend(read_f32(&dir.join(format!("gt_endmembers_px_{t:02}.f32")), np * l * p)?);
            }
            set = set.with_per_pixel(PerPixelEndmembers { height: h, width: w, data: px })?;
        }
        Some(set)
    } else {
        None
    };

    let gt_abundances = if meta.has_gt_abundances {
        let p = need_p("gt abundances")?;
        let mut a = Vec::with_capacity(t_n * p * np);
        for t in 0..t_n {
            a.extend(read_f32(&dir.join(format!("gt_abundance_{t:02}.f32")), p * np)?);
        }
        Some(AbundanceSequence::new(t_n, p, h, w, a)?)
    } else {
        None
    };

    let bundle = DatasetBundle {
        observed,
        gt_endmembers,
        gt_abundances,
        noise_snr_db: meta.noise_snr_db,
        seed: meta.seed,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateMeta {
    #[serde(rename = "T")]
    phases: usize,
    #[serde(rename = "L")]
    bands: usize,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    #[serde(rename = "P")]
    endmembers: usize,
}

/// Writes an unmixing result: `estimate.json`, `abundance_{t:02}.f32` `[P][H][W]`
/// and `endmembers_{t:02}.f32` `[L][P]`.
pub fn save_estimate(a: &AbundanceSequence, m: &EndmemberSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if a.phases() != m.phases() || a.endmembers() != m.endmembers() {
        return Err(Error::Shape(format!(
            "abundances are {}x{} (T x P) but endmembers are {}x{}",
            a.phases(),
            a.endmembers(),
            m.phases(),
            m.endmembers()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = EstimateMeta {
        phases: a.phases(),
        bands: m.bands(),
        height: a.height(),
        width: a.width(),
        endmembers: a.endmembers(),
    };
    let meta_path = dir.join("estimate.json");
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    let block = a.endmembers() * a.pixels();
    for (t, chunk) in a.data().chunks(block).enumerate() {
        write_f32(&dir.join(format!("abundance_{t:02}.f32")), chunk)?;
    }
    for t in 0..m.phases() {
        write_f32(&dir.join(format!("endmembers_{t:02}.f32")), m.phase(t))?;
    }
    Ok(())
}

/// Reads a result written by [`save_estimate`].
pub fn load_estimate(dir: impl AsRef<Path>) -> Result<(AbundanceSequence, EndmemberSet)> {
    let dir = dir.as_ref();
    let meta_path = dir.join("estimate.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::format(&meta_path, format!("cannot read: {e}")))?;
    let meta: EstimateMeta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let (t_n, l, p, np) = (meta.phases, meta.bands, meta.endmembers, meta.height * meta.width);
    let mut a = Vec::with_capacity(t_n * p * np);
    let mut m = Vec::with_capacity(t_n * l * p);
    for t in 0..t_n {
        a.extend(read_f32(&dir.join(format!("abundance_{t:02}.f32")), p * np)?);
        m.extend(read_f32(&dir.join(format!("endmembers_{t:02}.f32")), l * p)?);
    }
    Ok((AbundanceSequence::new(t_n, p, meta.height, meta.width, a)?, EndmemberSet::new(t_n, l, p, m)?))
}

fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for v in values {
        out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::format(path, format!("cannot read: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("holds {} bytes ({} floats), expected {} floats", bytes.len(), bytes.len() / 4, expected),
        ));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite value at index {i} of {}", path.display())));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_bundle(with_gt: bool) -> DatasetBundle {
        let (t, l, h, w, p) = (2, 3, 2, 2, 2);
        let data: Vec<f32> = (0..t * l * h * w).map(|i| i as f32 * 0.25 + 0.1).collect();
        let mut b = DatasetBundle::new(HyperCubeSequence::new(t, l, h, w, data).unwrap());
        b.seed = Some(9);
        if with_gt {
            let m: Vec<f32> = (0..t * l * p).map(|i| 1.0 + i as f32).collect();
            let px: Vec<f32> = (0..t * h * w * l * p).map(|i| 0.5 + i as f32).collect();
            b.gt_endmembers = Some(
                EndmemberSet::new(t, l, p, m)
                    .unwrap()
                    .with_per_pixel(PerPixelEndmembers { height: h, width: w, data: px })
                    .unwrap(),
            );
            b.gt_abundances = Some(AbundanceSequence::new(t, p, h, w, vec![0.5; t * p * h * w]).unwrap());
            b.noise_snr_db = Some(30.0);
        }
        b
    }

    #[test]
    fn estimate_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = small_bundle(true);
        let (a, m) = (b.gt_abundances.unwrap(), b.gt_endmembers.unwrap());
        save_estimate(&a, &m, dir.path()).unwrap();
        let (a2, m2) = load_estimate(dir.path()).unwrap();
        assert_eq!(a2, a);
        assert_eq!(m2.phase(1), m.phase(1));
        assert!(m2.per_pixel().is_none());
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let b = small_bundle(true);
        save_bundle(&b, dir.path()).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn saves_are_byte_identical() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let b = small_bundle(true);
        save_bundle(&b, d1.path()).unwrap();
        save_bundle(&b, d2.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(d1.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 1 + 2 + 2 + 2 + 2);
        for n in names {
            assert_eq!(fs::read(d1.path().join(&n)).unwrap(), fs::read(d2.path().join(&n)).unwrap());
        }
    }

    #[test]
    fn no_ground_truth_means_no_gt_files() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&small_bundle(false), dir.path()).unwrap();
        let names: Vec<String> =
            fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        assert!(names.iter().all(|n| !n.starts_with("gt_")));
        let meta = fs::read_to_string(dir.path().join("meta.json")).unwrap();
        assert!(!meta.contains("has_gt"));
        assert!(!meta.contains("has_per_pixel"));
    }

    #[test]
    fn short_raster_is_a_format_error_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&small_bundle(false), dir.path()).unwrap();
        let path = dir.path().join("phase_01.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::Format { file, .. }) => assert!(file.ends_with("phase_01.f32")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn nan_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&small_bundle(false), dir.path()).unwrap();
        let path = dir.path().join("phase_00.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn meta_band_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&small_bundle(false), dir.path()).unwrap();
        let meta = fs::read_to_string(dir.path().join("meta.json")).unwrap();
        fs::write(dir.path().join("meta.json"), meta.replace("\"L\": 3", "\"L\": 4")).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Format { .. })));
    }
}
