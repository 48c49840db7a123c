//! Smooth random abundance fields.

use rand::Rng;
use rand_distr::StandardNormal;

/// White Gaussian noise on an `h x w` grid blurred by a Gaussian of std `sigma` pixels,
/// then standardised to zero mean and unit variance.
pub fn smooth_field<R: Rng + ?Sized>(h: usize, w: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let mut field = gaussian_blur(&noise, h, w, sigma);
    standardize(&mut field);
    field
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * src[r * w + reflect(c as isize + j as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp[reflect(r as isize + j as isize - radius, h) * w + c])
                .sum();
        }
    }
    out
}

/// Shifts and scales `v` in place to zero mean and unit variance (no-op scale for constant input).
pub fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) * inv);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn blur_preserves_constants() {
        let src = vec![2.5; 7 * 5];
        let out = gaussian_blur(&src, 7, 5, 2.0);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn field_is_standardised_and_smooth() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let f = smooth_field(50, 50, 5.0, &mut rng);
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        let var = f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / f.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        // neighbouring pixels are strongly correlated after smoothing
        let diff: f64 = (0..50).flat_map(|r| (0..49).map(move |c| (r, c))).map(|(r, c)| (f[r * 50 + c] - f[r * 50 + c + 1]).powi(2)).sum::<f64>()
            / (50.0 * 49.0);
        assert!(diff < 0.1, "adjacent mean-square difference {diff}");
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 5), 1);
        assert_eq!(reflect(3, 1), 0);
    }
}
