//! Conventional distortions: JPEG-like quantisation, additive noise, border
//! crop, small affine warps, blur and sharpening.

use rand_distr::{Distribution, Normal};

use crate::dct::dct_matrix;
use crate::error::{LabError, Result};
use crate::image::ImageGrid;
use crate::rng::rng_from;

/// Standard JPEG luminance quantisation table, row-major `(u, v)`.
pub const LUMA_QUANT_TABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Quantiser steps (0–255 units) for a quality in `1..=100`.
pub fn quant_table(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(LabError::InvalidParam(format!("JPEG quality {quality} outside 1..=100")));
    }
    let q = quality as f64;
    let scale = if quality < 50 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, s) in t.iter_mut().zip(LUMA_QUANT_TABLE) {
        *o = (s * scale / 100.0).round().clamp(1.0, 255.0);
    }
    Ok(t)
}

/// Mirror index without edge repetition (`−1 → 1`, `n → n − 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// 8×8 block transform of one `h × w` plane in 0–255 units. `f` maps each
/// block's DCT coefficients in place.
pub(crate) fn blockwise_dct(plane: &[f64], h: usize, w: usize, mut f: impl FnMut(&mut [f64; 64])) -> Vec<f64> {
    let d = dct_matrix(8);
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let mut out = vec![0.0; h * w];
    let mut block = [0.0; 64];
    let mut tmp = [0.0; 64];
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            for i in 0..8 {
                for j in 0..8 {
                    let y = reflect_index((by + i) as isize, h);
                    let x = reflect_index((bx + j) as isize, w);
                    block[i * 8 + j] = plane[y * w + x] * 255.0 - 128.0;
                }
            }
            // C = D·B·Dᵀ
            mat8(&d, &block, &mut tmp, false, false);
            mat8(&tmp, &d, &mut block, false, true);
            f(&mut block);
            // B = Dᵀ·C·D
            mat8(&d, &block, &mut tmp, true, false);
            mat8(&tmp, &d, &mut block, false, false);
            for i in 0..8 {
                for j in 0..8 {
                    let (y, x) = (by + i, bx + j);
                    if y < h && x < w {
                        out[y * w + x] = (block[i * 8 + j] + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    out
}

/// `out = op(a)·op(b)` for 8×8 row-major matrices.
pub(crate) fn mat8(a: &[f64], b: &[f64], out: &mut [f64; 64], ta: bool, tb: bool) {
    for i in 0..8 {
        for j in 0..8 {
            let mut s = 0.0;
            for k in 0..8 {
                let av = if ta { a[k * 8 + i] } else { a[i * 8 + k] };
                let bv = if tb { b[j * 8 + k] } else { b[k * 8 + j] };
                s += av * bv;
            }
            out[i * 8 + j] = s;
        }
    }
}

/// JPEG-like compression of the luminance plane (reflect-padded to whole
/// 8×8 blocks, then cropped back). Chroma is left untouched.
pub fn jpeg_like(image: &ImageGrid, quality: u32) -> Result<ImageGrid> {
    let q = quant_table(quality)?;
    let luma = image.luminance();
    let out = blockwise_dct(&luma, image.height(), image.width(), |c| {
        for (v, s) in c.iter_mut().zip(q) {
            *v = (*v / s).round() * s;
        }
    });
    Ok(image.with_luminance(&out))
}

pub fn gaussian_noise(image: &ImageGrid, sigma_255: f64, seed: u64) -> Result<ImageGrid> {
    if !(sigma_255 >= 0.0 && sigma_255.is_finite()) {
        return Err(LabError::InvalidParam(format!("noise sigma {sigma_255} must be non-negative")));
    }
    if sigma_255 == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma_255 / 255.0).expect("finite sigma");
    let mut rng = rng_from(seed);
    let data = image.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
    ImageGrid::from_clamped(image.height(), image.width(), image.channels(), data)
}

/// Smallest border width removing at least `area_fraction` of the pixels.
pub fn crop_width(h: usize, w: usize, area_fraction: f64) -> Result<usize> {
    if !(0.0..0.5).contains(&area_fraction) {
        return Err(LabError::InvalidParam(format!("crop fraction {area_fraction} outside [0, 0.5)")));
    }
    let total = (h * w) as f64;
    let mut b = 0;
    while 2 * b < h.min(w) {
        let kept = ((h - 2 * b) * (w - 2 * b)) as f64;
        if 1.0 - kept / total >= area_fraction {
            return Ok(b);
        }
        b += 1;
    }
    Err(LabError::InvalidParam(format!("crop fraction {area_fraction} needs a border reaching the centre")))
}

/// Replaces a border of `crop_width` pixels with mid-gray; size unchanged.
pub fn crop_border(image: &ImageGrid, area_fraction: f64) -> Result<ImageGrid> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let b = crop_width(h, w, area_fraction)?;
    let mut data = image.data().to_vec();
    for y in 0..h {
        for x in 0..w {
            if y < b || y >= h - b || x < b || x >= w - b {
                data[(y * w + x) * c..(y * w + x + 1) * c].iter_mut().for_each(|v| *v = 0.5);
            }
        }
    }
    ImageGrid::new(h, w, c, data)
}

/// Rotation by `angle_deg` and isotropic scaling about the image centre,
/// bilinear resampling, mid-gray outside the source.
pub fn affine(image: &ImageGrid, angle_deg: f64, scale: f64) -> Result<ImageGrid> {
    if !(angle_deg.abs() <= 5.0) || !(0.9..=1.1).contains(&scale) {
        return Err(LabError::InvalidParam(format!(
            "affine angle {angle_deg} (|·| ≤ 5) or scale {scale} (0.9..=1.1) out of range"
        )));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse map: rotate by −θ, divide by scale
            let sx = cx + (cos * dx + sin * dy) / scale;
            let sy = cy + (-sin * dx + cos * dy) / scale;
            let inside = sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64;
            for ch in 0..c {
                if !inside {
                    data.push(0.5);
                    continue;
                }
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let top = image.get(y0, x0, ch) + (image.get(y0, x1, ch) - image.get(y0, x0, ch)) * fx;
                let bot = image.get(y1, x0, ch) + (image.get(y1, x1, ch) - image.get(y1, x0, ch)) * fx;
                data.push(top + (bot - top) * fy);
            }
        }
    }
    ImageGrid::from_clamped(h, w, c, data)
}

/// Normalised Gaussian taps, radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// `n × n` matrix of 1-D Gaussian filtering with reflect padding.
pub fn blur_matrix(n: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for (j, kv) in k.iter().enumerate() {
            let src = reflect_index(i as isize + j as isize - r, n);
            m[i * n + src] += kv;
        }
    }
    m
}

/// Applies `rows · X · colsᵀ` to every channel of an interleaved buffer.
pub(crate) fn separable(data: &[f64], h: usize, w: usize, c: usize, rows: &[f64], cols: &[f64]) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (j, m) in cols[x * w..(x + 1) * w].iter().enumerate() {
                    if *m != 0.0 {
                        s += m * data[(y * w + j) * c + ch];
                    }
                }
                tmp[(y * w + x) * c + ch] = s;
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for (i, m) in rows[y * h..(y + 1) * h].iter().enumerate() {
            if *m == 0.0 {
                continue;
            }
            for k in 0..w * c {
                out[y * w * c + k] += m * tmp[i * w * c + k];
            }
        }
    }
    out
}

/// Gaussian blur before clamping.
pub fn blur_unclamped(image: &ImageGrid, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma <= 3.0) {
        return Err(LabError::InvalidParam(format!("blur sigma {sigma} outside (0, 3]")));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    Ok(separable(image.data(), h, w, c, &blur_matrix(h, sigma), &blur_matrix(w, sigma)))
}

pub fn blur(image: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    let data = blur_unclamped(image, sigma)?;
    ImageGrid::from_clamped(image.height(), image.width(), image.channels(), data)
}

/// Unsharp masking: `x + amount · (x − blur(x, 1))`.
pub fn sharpen(image: &ImageGrid, amount: f64) -> Result<ImageGrid> {
    if !(amount > 0.0 && amount <= 1.0) {
        return Err(LabError::InvalidParam(format!("sharpen amount {amount} outside (0, 1]")));
    }
    let soft = blur_unclamped(image, 1.0)?;
    let data = image.data().iter().zip(&soft).map(|(x, b)| x + amount * (x - b)).collect();
    ImageGrid::from_clamped(image.height(), image.width(), image.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic_corpus, SyntheticStyle};
    use crate::metrics::psnr;
    use rand::Rng;

    fn sample(seed: u64) -> ImageGrid {
        synthetic_corpus(1, &SyntheticStyle::default(), seed).images.remove(0)
    }

    fn random_rgb(seed: u64) -> ImageGrid {
        let mut rng = rng_from(seed);
        ImageGrid::new(24, 40, 3, (0..24 * 40 * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn quant_table_scale_law() {
        assert!(quant_table(100).unwrap().iter().all(|v| *v == 1.0));
        assert_eq!(quant_table(50).unwrap(), LUMA_QUANT_TABLE);
        // quality 10 → scale 500, 16·5 = 80
        assert_eq!(quant_table(10).unwrap()[0], 80.0);
        assert_eq!(quant_table(1).unwrap()[63], 255.0);
        assert!(quant_table(0).is_err() && quant_table(101).is_err());
    }

    #[test]
    fn jpeg_quality_100_is_nearly_lossless() {
        for s in 0..5 {
            let img = sample(s);
            assert!(img.max_abs_diff(&jpeg_like(&img, 100).unwrap()) <= 0.01);
        }
        let rgb = random_rgb(3);
        assert!(rgb.max_abs_diff(&jpeg_like(&rgb, 100).unwrap()) <= 0.01);
    }

    #[test]
    fn jpeg_constant_image_within_one_quantum() {
        for q in [10, 50, 90] {
            let img = ImageGrid::filled(32, 32, 1, 0.37).unwrap();
            let out = jpeg_like(&img, q).unwrap();
            // DC step Q₀ moves pixels by at most Q₀ / 16 / 255
            let bound = quant_table(q).unwrap()[0] / 16.0 / 255.0 + 1e-12;
            assert!(img.max_abs_diff(&out) <= bound);
        }
    }

    #[test]
    fn jpeg_matches_direct_block_oracle() {
        // Oracle: textbook per-coefficient cosine sums on one aligned block.
        let img = sample(9);
        let out = jpeg_like(&img, 50).unwrap();
        let q = quant_table(50).unwrap();
        let c = |k: usize| if k == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        let cosv = |k: usize, n: usize| (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        let (by, bx) = (8, 16);
        let mut coef = [0.0; 64];
        for u in 0..8 {
            for v in 0..8 {
                let mut s = 0.0;
                for y in 0..8 {
                    for x in 0..8 {
                        s += (img.get(by + y, bx + x, 0) * 255.0 - 128.0) * cosv(u, y) * cosv(v, x);
                    }
                }
                let val = c(u) * c(v) * s;
                coef[u * 8 + v] = (val / q[u * 8 + v]).round() * q[u * 8 + v];
            }
        }
        for y in 0..8 {
            for x in 0..8 {
                let mut s = 0.0;
                for u in 0..8 {
                    for v in 0..8 {
                        s += c(u) * c(v) * coef[u * 8 + v] * cosv(u, y) * cosv(v, x);
                    }
                }
                let want = ((s + 128.0) / 255.0).clamp(0.0, 1.0);
                assert!((out.get(by + y, bx + x, 0) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jpeg_pads_odd_sizes_and_keeps_chroma() {
        let mut rng = rng_from(4);
        let img = ImageGrid::new(13, 21, 3, (0..13 * 21 * 3).map(|_| 0.2 + 0.6 * rng.gen::<f64>()).collect()).unwrap();
        let out = jpeg_like(&img, 60).unwrap();
        assert_eq!((out.height(), out.width()), (13, 21));
        let (l0, l1) = (img.luminance(), out.luminance());
        for p in 0..13 * 21 {
            let d = [0, 1, 2].map(|ch| out.data()[p * 3 + ch] - img.data()[p * 3 + ch]);
            if out.data()[p * 3..p * 3 + 3].iter().all(|v| *v > 0.0 && *v < 1.0) {
                assert!((d[0] - d[1]).abs() < 1e-12 && (d[1] - d[2]).abs() < 1e-12);
                assert!((d[0] - (l1[p] - l0[p])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_statistics_and_identity() {
        let img = ImageGrid::filled(128, 128, 1, 0.5).unwrap();
        assert_eq!(gaussian_noise(&img, 0.0, 1).unwrap(), img);
        let out = gaussian_noise(&img, 10.0, 2).unwrap();
        let n = out.data().len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        let sd = (out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd / (10.0 / 255.0) - 1.0).abs() < 0.02, "{sd}");
        assert_eq!(out, gaussian_noise(&img, 10.0, 2).unwrap());
        assert!(gaussian_noise(&img, -1.0, 2).is_err());
    }

    #[test]
    fn crop_width_enumeration() {
        assert_eq!(crop_width(32, 32, 0.10).unwrap(), 1);
        let removed = 1.0 - (30.0 * 30.0) / 1024.0;
        assert!((removed - 0.12109375f64).abs() < 1e-12);
        assert_eq!(crop_width(32, 32, 0.0).unwrap(), 0);
        assert_eq!(crop_width(32, 32, 0.2).unwrap(), 2);
        assert_eq!(crop_width(8, 8, 0.49).unwrap(), 2);
        assert!(crop_width(32, 32, 0.5).is_err());
        let img = sample(1);
        assert_eq!(crop_border(&img, 0.0).unwrap(), img);
        let c = crop_border(&img, 0.1).unwrap();
        assert_eq!(c.get(0, 5, 0), 0.5);
        assert_eq!(c.get(5, 5, 0), img.get(5, 5, 0));
    }

    #[test]
    fn affine_identity_and_round_trip() {
        let img = sample(2);
        assert!(img.max_abs_diff(&affine(&img, 0.0, 1.0).unwrap()) <= 1e-6);
        for angle in [2.0, -4.0] {
            let back = affine(&affine(&img, angle, 1.0).unwrap(), -angle, 1.0).unwrap();
            assert!(psnr(&img, &back).unwrap() >= 30.0);
        }
        assert!(affine(&img, 6.0, 1.0).is_err() && affine(&img, 0.0, 1.2).is_err());
        let zoom = affine(&img, 0.0, 1.05).unwrap();
        assert!(zoom.max_abs_diff(&img) > 0.0);
    }

    #[test]
    fn blur_kernel_and_limits() {
        for s in [0.3, 0.8, 1.0, 2.5] {
            let k = gaussian_kernel(s);
            assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let m = blur_matrix(32, s);
            for i in 0..32 {
                assert!((m[i * 32..(i + 1) * 32].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let img = sample(3);
        assert!(img.max_abs_diff(&blur(&img, 0.1).unwrap()) <= 0.01);
        let flat = ImageGrid::filled(16, 16, 3, 0.42).unwrap();
        assert!(flat.max_abs_diff(&blur(&flat, 2.0).unwrap()) < 1e-12);
        assert!(flat.max_abs_diff(&sharpen(&flat, 1.0).unwrap()) < 1e-12);
        assert!(blur(&img, 0.0).is_err() && blur(&img, 3.5).is_err() && sharpen(&img, 1.5).is_err());
        // reflect padding does not conserve the mean exactly; the drift is small
        let b = blur_unclamped(&img, 1.0).unwrap();
        assert!((b.iter().sum::<f64>() / 1024.0 - img.mean()).abs() < 2e-3);
    }

    #[test]
    fn blur_matches_direct_convolution() {
        let img = sample(5);
        let s = 1.3;
        let k = gaussian_kernel(s);
        let r = (k.len() / 2) as isize;
        let out = blur_unclamped(&img, s).unwrap();
        for (y, x) in [(0usize, 0usize), (3, 17), (31, 30), (16, 16)] {
            let mut v = 0.0;
            for (i, ki) in k.iter().enumerate() {
                for (j, kj) in k.iter().enumerate() {
                    let sy = reflect_index(y as isize + i as isize - r, 32);
                    let sx = reflect_index(x as isize + j as isize - r, 32);
                    v += ki * kj * img.get(sy, sx, 0);
                }
            }
            assert!((v - out[y * 32 + x]).abs() < 1e-12);
        }
    }

    #[test]
    fn reflect_index_mirrors_without_repeating_edges() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }
}
