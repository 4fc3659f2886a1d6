//! Radially averaged power spectrum of the luminance difference of two images.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::Result;
use crate::image::ImageGrid;

/// Signed frequency of DFT bin `k` of an `n`-point transform.
fn centred(k: usize, n: usize) -> f64 {
    if k <= n / 2 { k as f64 } else { k as f64 - n as f64 }
}

/// 2-D DFT power `|F(a − b)|² / (H·W)` averaged over integer-radius annuli
/// (radius rounded to the nearest integer), DC bin first.
pub fn residual_spectrum(a: &ImageGrid, b: &ImageGrid) -> Result<Vec<f64>> {
    a.ensure_same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    let mut buf: Vec<Complex<f64>> =
        a.luminance().iter().zip(b.luminance()).map(|(x, y)| Complex::new(x - y, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    let max_r = ((h / 2).pow(2) as f64 + (w / 2).pow(2) as f64).sqrt().round() as usize;
    let mut sums = vec![0.0; max_r + 1];
    let mut counts = vec![0usize; max_r + 1];
    let norm = (h * w) as f64;
    for y in 0..h {
        for x in 0..w {
            let r = centred(y, h).hypot(centred(x, w)).round() as usize;
            sums[r] += buf[y * w + x].norm_sqr() / norm;
            counts[r] += 1;
        }
    }
    Ok(sums.iter().zip(&counts).map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 }).collect())
}

/// Share of total spectral energy (power × bin population) falling in radii `lo..=hi`.
pub fn band_energy_fraction(spectrum: &[f64], h: usize, w: usize, lo: usize, hi: usize) -> f64 {
    let mut counts = vec![0usize; spectrum.len()];
    for y in 0..h {
        for x in 0..w {
            let r = centred(y, h).hypot(centred(x, w)).round() as usize;
            if r < counts.len() {
                counts[r] += 1;
            }
        }
    }
    let energy: Vec<f64> = spectrum.iter().zip(&counts).map(|(p, c)| p * *c as f64).collect();
    let total: f64 = energy.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    energy.iter().enumerate().filter(|(r, _)| (lo..=hi).contains(r)).map(|(_, e)| e).sum::<f64>() / total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_give_zero_spectrum() {
        let a = ImageGrid::filled(16, 16, 1, 0.3).unwrap();
        assert!(residual_spectrum(&a, &a).unwrap().iter().all(|v| *v == 0.0));
        assert!(residual_spectrum(&a, &ImageGrid::filled(8, 8, 1, 0.3).unwrap()).is_err());
    }

    #[test]
    fn sinusoid_lands_in_its_annulus() {
        let (n, k) = (32usize, 5usize);
        let a = ImageGrid::filled(n, n, 1, 0.5).unwrap();
        let data = (0..n * n)
            .map(|i| 0.5 + 0.1 * (2.0 * std::f64::consts::PI * k as f64 * (i % n) as f64 / n as f64).cos())
            .collect();
        let b = ImageGrid::new(n, n, 1, data).unwrap();
        let s = residual_spectrum(&a, &b).unwrap();
        let peak = s.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
        assert_eq!(peak, k);
        let others: f64 = s.iter().enumerate().filter(|(r, _)| *r != k).map(|(_, v)| v).sum();
        assert!(others < 1e-20);
        // Parseval: total energy equals the spatial sum of squares
        let total: f64 = (0..n * n).map(|i| (b.data()[i] - 0.5).powi(2)).sum();
        assert!((band_energy_fraction(&s, n, n, k, k) - 1.0).abs() < 1e-12);
        let mut counts = vec![0usize; s.len()];
        for y in 0..n {
            for x in 0..n {
                counts[centred(y, n).hypot(centred(x, n)).round() as usize] += 1;
            }
        }
        let e: f64 = s.iter().zip(&counts).map(|(p, c)| p * *c as f64).sum();
        assert!((e - total).abs() < 1e-9);
    }
}
