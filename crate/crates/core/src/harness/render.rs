//! PNG output: abundance maps, RGB composites and endmember line plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::datamodel::{AbundanceSequence, EndmemberSet};
use crate::{Error, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: PathBuf, out: &mut Vec<PathBuf>) -> Result<()> {
    img(&path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(&path, io),
        e => Error::Image(e),
    })?;
    out.push(path);
    Ok(())
}

/// Writes `abundance_t{t}_p{p}.png` for every phase and endmember (values clipped to
/// `[0, 1]`) and `composite_t{t}.png`, which puts the first three endmembers on R, G, B.
pub fn render_maps(a: &AbundanceSequence, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    ensure_dir(dir)?;
    let (h, w, n) = (a.height() as u32, a.width() as u32, a.pixels());
    let mut written = Vec::new();
    for t in 0..a.phases() {
        let phase = a.phase(t);
        for p in 0..a.endmembers() {
            let plane = &phase[p * n..(p + 1) * n];
            let img = GrayImage::from_fn(w, h, |x, y| Luma([to_byte(f64::from(plane[(y * w + x) as usize]))]));
            save(|path| img.save(path), dir.join(format!("abundance_t{t}_p{p}.png")), &mut written)?;
        }
        let img = RgbImage::from_fn(w, h, |x, y| {
            let i = (y * w + x) as usize;
            let ch = |p: usize| if p < a.endmembers() { to_byte(f64::from(phase[p * n + i])) } else { 0 };
            Rgb([ch(0), ch(1), ch(2)])
        });
        save(|path| img.save(path), dir.join(format!("composite_t{t}.png")), &mut written)?;
    }
    Ok(written)
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 240;
const MARGIN: u32 = 10;

fn phase_colour(t: usize, phases: usize) -> Rgb<u8> {
    // blue for the first phase through red for the last
    let f = if phases > 1 { t as f64 / (phases - 1) as f64 } else { 0.0 };
    Rgb([to_byte(f), 40, to_byte(1.0 - f)])
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// One line plot per endmember (`endmember_p{p}.png`) overlaying its spectrum in every phase,
/// plus `endmembers.csv` with columns `phase,endmember,band,value`.
pub fn render_endmembers(m: &EndmemberSet, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    ensure_dir(dir)?;
    let (t_n, l, p_n) = (m.phases(), m.bands(), m.endmembers());
    let phases: Vec<Vec<f64>> = (0..t_n).map(|t| m.phase_f64(t)).collect();
    let top = phases.iter().flatten().copied().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let mut written = Vec::new();
    for p in 0..p_n {
        let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
        let (x_span, y_span) = ((PLOT_W - 2 * MARGIN) as f64, (PLOT_H - 2 * MARGIN) as f64);
        let to_px = |band: usize, v: f64| {
            let x = MARGIN as f64 + x_span * band as f64 / (l.max(2) - 1) as f64;
            let y = (PLOT_H - MARGIN) as f64 - y_span * (v / top).clamp(0.0, 1.0);
            (x.round() as i64, y.round() as i64)
        };
        draw_line(&mut img, to_px(0, 0.0), to_px(l - 1, 0.0), Rgb([160, 160, 160]));
        for (t, mt) in phases.iter().enumerate() {
            let c = phase_colour(t, t_n);
            for band in 1..l {
                draw_line(&mut img, to_px(band - 1, mt[(band - 1) * p_n + p]), to_px(band, mt[band * p_n + p]), c);
            }
        }
        save(|path| img.save(path), dir.join(format!("endmember_p{p}.png")), &mut written)?;
    }
    let mut csv = String::from("phase,endmember,band,value\n");
    for (t, mt) in phases.iter().enumerate() {
        for p in 0..p_n {
            for band in 0..l {
                let _ = writeln!(csv, "{t},{p},{band},{}", mt[band * p_n + p]);
            }
        }
    }
    let path = dir.join("endmembers.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(t: usize, p: usize, h: usize, w: usize, v: f32) -> AbundanceSequence {
        AbundanceSequence::new(t, p, h, w, vec![v; t * p * h * w]).unwrap()
    }

    #[test]
    fn file_counts() {
        let dir = tempfile::tempdir().unwrap();
        let files = render_maps(&constant(3, 2, 4, 5, 0.5), dir.path()).unwrap();
        let grey = files.iter().filter(|f| f.to_string_lossy().contains("abundance_")).count();
        let rgb = files.iter().filter(|f| f.to_string_lossy().contains("composite_")).count();
        assert_eq!((grey, rgb), (6, 3));
    }

    #[test]
    fn half_is_mid_grey_and_out_of_range_is_clipped() {
        let dir = tempfile::tempdir().unwrap();
        render_maps(&constant(1, 1, 3, 3, 0.5), dir.path()).unwrap();
        let img = image::open(dir.path().join("abundance_t0_p0.png")).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 128));
        let mut a = constant(1, 1, 1, 2, 0.0).data().to_vec();
        a[0] = 1.5;
        a[1] = -0.5;
        assert_eq!((to_byte(f64::from(a[0])), to_byte(f64::from(a[1]))), (255, 0));
    }

    #[test]
    fn rerender_is_byte_identical() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let data: Vec<f32> = (0..2 * 3 * 16).map(|i| (i % 7) as f32 / 6.0).collect();
        let a = AbundanceSequence::new(2, 3, 4, 4, data).unwrap();
        let f1 = render_maps(&a, d1.path()).unwrap();
        let f2 = render_maps(&a, d2.path()).unwrap();
        for (x, y) in f1.iter().zip(&f2) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn endmember_plot_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let m = EndmemberSet::from_f64(3, 2, &[vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![0.2, 0.2, 0.3, 0.3, 0.4, 0.4]])
            .unwrap();
        let files = render_endmembers(&m, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let csv = std::fs::read_to_string(dir.path().join("endmembers.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 2 * 3);
        assert!(csv.contains("1,1,2,0.4"));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let err = render_maps(&constant(1, 1, 2, 2, 0.5), blocker.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
