//! Decoding and fidelity metrics. Intensities are in `[0, 1]` with peak 1.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::image::ImageGrid;
use crate::watermark::Payload;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    pub bit_accuracy: f64,
    pub ber: f64,
    pub payload_success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityMetrics {
    /// `f64::INFINITY` for identical images.
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn bit_metrics(truth: &Payload, decoded: &Payload) -> Result<DecodeMetrics> {
    if truth.len() != decoded.len() {
        return Err(LabError::PayloadLength { expected: truth.len(), got: decoded.len() });
    }
    let n = truth.len();
    let errors = truth.bits().iter().zip(decoded.bits()).filter(|(a, b)| a != b).count();
    Ok(DecodeMetrics {
        bit_accuracy: (n - errors) as f64 / n as f64,
        ber: errors as f64 / n as f64,
        payload_success: errors == 0,
    })
}

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB; `+∞` when the images are identical.
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> f64 {
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect() };
    let mu_a = filter_valid(a, h, w, k);
    let mu_b = filter_valid(b, h, w, k);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, k);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, k);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    total / n as f64
}

/// Single-scale SSIM, 11×11 Gaussian window (σ 1.5), averaged over valid
/// window positions and then over channels.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(LabError::InvalidImage(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let k = ssim_kernel();
    let c = a.channels();
    let sum: f64 = (0..c).map(|ch| ssim_plane(&a.plane(ch), &b.plane(ch), a.height(), a.width(), &k)).sum();
    Ok(sum / c as f64)
}

pub fn fidelity(reference: &ImageGrid, test: &ImageGrid) -> Result<FidelityMetrics> {
    Ok(FidelityMetrics { psnr_db: psnr(reference, test)?, ssim: ssim(reference, test)? })
}

/// CSV rendering; infinite PSNR becomes `inf`.
pub fn format_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn textured(h: usize, w: usize) -> ImageGrid {
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                0.5 + 0.2 * (0.7 * x).sin() * (0.4 * y).cos() + 0.05 * (1.9 * x + 0.3 * y).sin()
            })
            .collect();
        ImageGrid::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn bit_metrics_counts_mismatches() {
        let a = Payload::from_bits((0..16).map(|i| i % 3 == 0).collect());
        let mut bits = a.bits().to_vec();
        for i in [1, 5, 9, 13] {
            bits[i] = !bits[i];
        }
        let m = bit_metrics(&a, &Payload::from_bits(bits)).unwrap();
        assert_eq!(m.bit_accuracy, 0.75);
        assert_eq!(m.ber, 0.25);
        assert!(!m.payload_success);
        let same = bit_metrics(&a, &a).unwrap();
        assert!(same.payload_success && same.bit_accuracy == 1.0);
        assert_eq!(bit_metrics(&a, &a.complement()).unwrap().bit_accuracy, 0.0);
        assert!(bit_metrics(&a, &Payload::zeros(8)).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageGrid::filled(16, 16, 1, 0.3).unwrap();
        let b = ImageGrid::filled(16, 16, 1, 0.4).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);

        let zero = ImageGrid::filled(16, 16, 1, 0.0).unwrap();
        let mut d = vec![0.0; 256];
        d[37] = 1.0;
        let one = ImageGrid::new(16, 16, 1, d).unwrap();
        assert!((psnr(&zero, &one).unwrap() - 10.0 * 256f64.log10()).abs() < 1e-9);
        assert_eq!(format_metric(f64::INFINITY), "inf");
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = textured(32, 32);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map_pixels(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 0.1);
        assert!(ssim(&ImageGrid::filled(8, 8, 1, 0.5).unwrap(), &ImageGrid::filled(8, 8, 1, 0.5).unwrap()).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        // Oracle: explicit 2-D weighted statistics at each valid position.
        let a = textured(14, 13);
        let b = a.map_pixels(|v| 0.8 * v + 0.1 + 0.02 * (v * 40.0).sin());
        let k = ssim_kernel();
        let (h, w) = (14, 13);
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = k[i] * k[j];
                        let (p, q) = (a.get(y0 + i, x0 + j, 0), b.get(y0 + i, x0 + j, 0));
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let (va, vb, cv) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cv + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        assert!((ssim(&a, &b).unwrap() - acc / count as f64).abs() < 1e-12);
    }

    #[test]
    fn ssim_decreases_with_offset() {
        let a = textured(32, 32);
        let vals: Vec<f64> = [0.02, 0.05, 0.1]
            .iter()
            .map(|c| {
                let b = ImageGrid::new(32, 32, 1, a.data().iter().map(|v| v + c).collect()).unwrap();
                ssim(&a, &b).unwrap()
            })
            .collect();
        assert!(vals[0] < 1.0 && vals[1] < vals[0] && vals[2] < vals[1]);
    }

    proptest! {
        #[test]
        fn psnr_and_ssim_are_symmetric(seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = crate::rng::rng_from(seed);
            let a = ImageGrid::new(16, 16, 3, (0..768).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let b = ImageGrid::new(16, 16, 3, (0..768).map(|_| rng.gen::<f64>()).collect()).unwrap();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn bit_metrics_permutation_equivariant(bits in proptest::collection::vec(any::<(bool, bool)>(), 1..40), rot in 0usize..40) {
            let (t, d): (Vec<bool>, Vec<bool>) = bits.iter().copied().unzip();
            let r = rot % t.len();
            let rotate = |v: &Vec<bool>| { let mut v = v.clone(); v.rotate_left(r); v };
            let m1 = bit_metrics(&Payload::from_bits(t.clone()), &Payload::from_bits(d.clone())).unwrap();
            let m2 = bit_metrics(&Payload::from_bits(rotate(&t)), &Payload::from_bits(rotate(&d))).unwrap();
            prop_assert_eq!(m1, m2);
            prop_assert_eq!(m1.bit_accuracy + m1.ber, 1.0);
        }
    }
}
