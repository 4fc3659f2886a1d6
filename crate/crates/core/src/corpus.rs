//! Corpus ingestion, resizing, splitting and image interchange.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder};
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dct::Dct2;
use crate::error::{LabError, Result};
use crate::image::ImageGrid;
use crate::rng::{derived_rng, rng_from};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// Train/test partition as indices into [`Corpus::images`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub images: Vec<ImageGrid>,
    /// One name per image (file name for loaded corpora).
    pub names: Vec<String>,
    pub split: Split,
    pub seed: u64,
}

impl Corpus {
    /// A corpus whose split puts every image in the training set.
    pub fn unsplit(images: Vec<ImageGrid>, names: Vec<String>) -> Self {
        let train = (0..images.len()).collect();
        Self { images, names, split: Split { train, test: Vec::new() }, seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn train_images(&self) -> impl Iterator<Item = &ImageGrid> + '_ {
        self.split.train.iter().map(move |&i| &self.images[i])
    }

    pub fn test_images(&self) -> impl Iterator<Item = &ImageGrid> + '_ {
        self.split.test.iter().map(move |&i| &self.images[i])
    }

    /// Split manifest: one `train` and one `test` section listing names.
    pub fn manifest(&self) -> String {
        let mut out = format!("# seed {}\n[train]\n", self.seed);
        for &i in &self.split.train {
            out.push_str(&self.names[i]);
            out.push('\n');
        }
        out.push_str("[test]\n");
        for &i in &self.split.test {
            out.push_str(&self.names[i]);
            out.push('\n');
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.manifest())?;
        Ok(())
    }
}

/// Corner-aligned bilinear resampling of an interleaved `h × w × c` buffer:
/// output sample `i` reads source coordinate `i · (in − 1) / (out − 1)`.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                // lerp form keeps constant inputs exactly constant
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    out
}

fn dynamic_to_buffer(img: DynamicImage) -> (usize, usize, usize, Vec<f64>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img.color(),
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16
    );
    if gray {
        let buf = img.to_luma16();
        (h, w, 1, buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())
    } else {
        let buf = img.to_rgb16();
        (h, w, 3, buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())
    }
}

/// Reads a PNG or binary PGM/PPM at its native size.
pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path)?;
    let (h, w, c, data) = dynamic_to_buffer(img);
    ImageGrid::from_clamped(h, w, c, data)
}

/// Reads an image and resizes it bilinearly to `size × size`.
pub fn read_resized(path: &Path, size: usize) -> Result<ImageGrid> {
    let img = image::open(path)?;
    let (h, w, c, data) = dynamic_to_buffer(img);
    let data = if h == size && w == size { data } else { resize_bilinear(&data, h, w, c, size, size) };
    ImageGrid::from_clamped(size, size, c, data)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Loads every PNG/PGM/PPM in `dir` (lexicographic by file name), resized to
/// `target_size × target_size`. Unreadable files are skipped with a warning.
pub fn load_corpus(dir: &Path, target_size: usize) -> Result<Corpus> {
    if target_size < crate::image::MIN_SIDE {
        return Err(LabError::InvalidParam(format!("target size {target_size} below {}", crate::image::MIN_SIDE)));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_image_extension(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(LabError::EmptyCorpus(dir.to_path_buf()));
    }
    let mut images = Vec::new();
    let mut names = Vec::new();
    for p in &paths {
        match read_resized(p, target_size) {
            Ok(img) => {
                images.push(img);
                names.push(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
            }
            Err(e) => warn!("skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(LabError::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(Corpus::unsplit(images, names))
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes an 8-bit PNG, or binary PGM/PPM for `.pgm`/`.ppm`/`.pnm` paths.
pub fn write_image(image: &ImageGrid, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.data().iter().map(|v| quantize(*v)).collect();
    let (w, h) = (image.width() as u32, image.height() as u32);
    let color = if image.channels() == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
    let file = BufWriter::new(fs::File::create(path)?);
    match ext.as_deref() {
        Some("pgm") | Some("ppm") | Some("pnm") => {
            let subtype = if image.channels() == 1 {
                PnmSubtype::Graymap(SampleEncoding::Binary)
            } else {
                PnmSubtype::Pixmap(SampleEncoding::Binary)
            };
            PnmEncoder::new(file).with_subtype(subtype).write_image(&bytes, w, h, color)?;
        }
        _ => {
            image::codecs::png::PngEncoder::new(file).write_image(&bytes, w, h, color)?;
        }
    }
    Ok(())
}

/// Seeded shuffle, then partition. The smaller side takes the head of the
/// shuffled order, so fractions `f` and `1 − f` with one seed give swapped
/// partitions.
pub fn split_corpus(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<Corpus> {
    if corpus.is_empty() {
        return Err(LabError::InvalidSplit("empty corpus".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(LabError::InvalidSplit(format!("train fraction {train_fraction} not in (0,1)")));
    }
    let n = corpus.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(LabError::InvalidSplit(format!(
            "fraction {train_fraction} of {n} images leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    let n_test = n - n_train;
    let (mut train, mut test) = if n_train <= n_test {
        (order[..n_train].to_vec(), order[n_train..].to_vec())
    } else {
        (order[n_test..].to_vec(), order[..n_test].to_vec())
    };
    train.sort_unstable();
    test.sort_unstable();
    Ok(Corpus { images: corpus.images.clone(), names: corpus.names.clone(), split: Split { train, test }, seed })
}

/// 1-D Gaussian smoothing with edge replication, truncated at four sigma.
fn gaussian_smooth_nearest(plane: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let clampi = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane[y * n + clampi(x as isize + j as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clampi(y as isize + j as isize - radius) * n + x])
                .sum();
        }
    }
    out
}

/// Settings of the built-in synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticStyle {
    pub size: usize,
    /// Pixel standard deviation of the low-frequency texture.
    pub texture_std: f64,
    pub rect_amplitude: f64,
    pub rect_edge_sigma: f64,
    /// Texture occupies DCT coefficients with `0 < u + v ≤ max_freq`.
    pub max_freq: usize,
    /// Contrast at the image border relative to the centre.
    pub border_contrast: f64,
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        Self { size: 32, texture_std: 0.3, rect_amplitude: 0.25, rect_edge_sigma: 2.5, max_freq: 3, border_contrast: 0.2 }
    }
}

/// One synthetic grayscale image: tilted background, soft rectangles and
/// band-limited texture, with contrast tapered toward the border by a sine
/// window.
pub fn synthetic_image(rng: &mut impl Rng, style: &SyntheticStyle) -> ImageGrid {
    let n = style.size;
    let denom = (n - 1) as f64;
    let base = rng.gen_range(0.35..0.65);
    let gx = rng.gen_range(-0.15..0.15);
    let gy = rng.gen_range(-0.15..0.15);
    let mut img: Vec<f64> = (0..n * n)
        .map(|i| base + gx * ((i % n) as f64 / denom - 0.5) + gy * ((i / n) as f64 / denom - 0.5))
        .collect();

    let rects = rng.gen_range(1..3);
    let (lo, hi) = (n / 4, (n * 5 / 8).max(n / 4 + 1));
    for _ in 0..rects {
        let h = rng.gen_range(lo..hi);
        let w = rng.gen_range(lo..hi);
        let y0 = rng.gen_range(0..n - h);
        let x0 = rng.gen_range(0..n - w);
        let mut mask = vec![0.0; n * n];
        for y in y0..y0 + h {
            mask[y * n + x0..y * n + x0 + w].iter_mut().for_each(|v| *v = 1.0);
        }
        let mask = gaussian_smooth_nearest(&mask, n, style.rect_edge_sigma);
        let amp = rng.gen_range(-style.rect_amplitude..style.rect_amplitude);
        img.iter_mut().zip(&mask).for_each(|(v, m)| *v += amp * m);
    }

    let mut coeffs = vec![0.0; n * n];
    for u in 0..=style.max_freq {
        for v in 0..=style.max_freq {
            if u + v > 0 && u + v <= style.max_freq {
                coeffs[u * n + v] = rng.sample(StandardNormal);
            }
        }
    }
    let texture = Dct2::new(n, n).inverse(&coeffs);
    let mean = texture.iter().sum::<f64>() / texture.len() as f64;
    let std = (texture.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / texture.len() as f64).sqrt();
    let scale = if std > 0.0 { style.texture_std / std } else { 0.0 };
    let window: Vec<f64> = (0..n)
        .map(|i| {
            let s = (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin();
            style.border_contrast + (1.0 - style.border_contrast) * s
        })
        .collect();
    let data = img
        .iter()
        .zip(&texture)
        .enumerate()
        .map(|(i, (v, t))| {
            let clipped = (v + t * scale).clamp(0.0, 1.0);
            (0.5 + (clipped - 0.5) * window[i / n] * window[i % n]).clamp(0.0, 1.0)
        })
        .collect();
    ImageGrid::new(n, n, 1, data).expect("synthetic image is in range")
}

/// `count` synthetic images, image `i` drawn from its own derived stream.
pub fn synthetic_corpus(count: usize, style: &SyntheticStyle, seed: u64) -> Corpus {
    let images = crate::par::map_indices(count, |i| synthetic_image(&mut derived_rng(seed, "synthetic", i as u64), style));
    let names = (0..count).map(|i| format!("synth_{i:05}")).collect();
    let mut c = Corpus::unsplit(images, names);
    c.seed = seed;
    c
}

/// Writes every image of a corpus as PNG into `dir`, named after the corpus.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (img, name) in corpus.images.iter().zip(&corpus.names) {
        let file = if has_image_extension(Path::new(name)) { name.clone() } else { format!("{name}.png") };
        write_image(img, &dir.join(file))?;
    }
    let mut f = fs::File::create(dir.join("manifest.txt"))?;
    f.write_all(corpus.manifest().as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed: u64, c: usize) -> ImageGrid {
        let mut rng = rng_from(seed);
        ImageGrid::new(32, 32, c, (0..32 * 32 * c).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn constant_upsample_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        image::GrayImage::from_pixel(2, 2, image::Luma([255])).save(dir.path().join("white.png")).unwrap();
        let corpus = load_corpus(dir.path(), 32).unwrap();
        assert_eq!(corpus.len(), 1);
        assert!(corpus.images[0].data().iter().all(|v| *v == 1.0));
        assert_eq!(corpus.images[0].height(), 32);
    }

    #[test]
    fn bilinear_matches_hand_computation() {
        // 2×2 → 3×3: centre is the mean of the four corners, edges are midpoints.
        let out = resize_bilinear(&[0.0, 0.2, 0.4, 1.0], 2, 2, 1, 3, 3);
        let want = [0.0, 0.1, 0.2, 0.2, 0.4, 0.6, 0.4, 0.7, 1.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn write_read_round_trip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        for (c, ext) in [(1, "png"), (3, "png"), (1, "pgm"), (3, "ppm")] {
            let img = random_image(7 + c as u64, c);
            let p1 = dir.path().join(format!("a_{c}.{ext}"));
            let p2 = dir.path().join(format!("b_{c}.{ext}"));
            write_image(&img, &p1).unwrap();
            let back = read_image(&p1).unwrap();
            assert!(img.max_abs_diff(&back) <= 1.0 / 255.0 + 1e-12);
            write_image(&back, &p2).unwrap();
            assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        }
        let zero = ImageGrid::filled(16, 16, 1, 0.0).unwrap();
        let p = dir.path().join("zero.png");
        write_image(&zero, &p).unwrap();
        assert_eq!(read_image(&p).unwrap(), zero);
    }

    #[test]
    fn empty_and_unreadable_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus(dir.path(), 32), Err(LabError::EmptyCorpus(_))));
        fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        assert!(matches!(load_corpus(dir.path(), 32), Err(LabError::EmptyCorpus(_))));
        write_image(&random_image(1, 1), &dir.path().join("ok.png")).unwrap();
        assert_eq!(load_corpus(dir.path(), 32).unwrap().len(), 1);
    }

    #[test]
    fn load_is_lexicographic_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["c.png", "a.pgm", "b.ppm"].iter().enumerate() {
            write_image(&random_image(i as u64, if name.ends_with("ppm") { 3 } else { 1 }), &dir.path().join(name)).unwrap();
        }
        let a = load_corpus(dir.path(), 16).unwrap();
        let b = load_corpus(dir.path(), 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.names, vec!["a.pgm", "b.ppm", "c.png"]);
        assert_eq!(a.images[1].channels(), 3);
    }

    #[test]
    fn split_sizes_and_complementarity() {
        let corpus = synthetic_corpus(10, &SyntheticStyle::default(), 3);
        let s8 = split_corpus(&corpus, 0.8, 11).unwrap();
        assert_eq!((s8.split.train.len(), s8.split.test.len()), (8, 2));
        assert_eq!(s8, split_corpus(&corpus, 0.8, 11).unwrap());
        let s2 = split_corpus(&corpus, 0.2, 11).unwrap();
        let mut union: Vec<usize> = s8.split.test.iter().chain(&s2.split.test).copied().collect();
        union.sort_unstable();
        assert_eq!(union, (0..10).collect::<Vec<_>>());
        assert!(split_corpus(&corpus, 0.01, 1).is_err());
        assert!(split_corpus(&corpus, 0.99, 1).is_err());
        let manifest = s8.manifest();
        assert_eq!(manifest.lines().count(), 1 + 2 + 10);
    }

    #[test]
    fn synthetic_images_are_valid_and_seeded() {
        let style = SyntheticStyle::default();
        let a = synthetic_corpus(5, &style, 9);
        assert_eq!(a, synthetic_corpus(5, &style, 9));
        assert_ne!(a.images[0], synthetic_corpus(5, &style, 10).images[0]);
        for img in &a.images {
            // border pixels are pulled toward mid-gray by the window
            assert!((img.get(0, 0, 0) - 0.5).abs() <= 0.5 * style.border_contrast * 1.01);
        }
    }

    proptest! {
        #[test]
        fn split_partitions_cover_and_are_disjoint(n in 2usize..60, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let imgs = vec![ImageGrid::filled(8, 8, 1, 0.5).unwrap(); n];
            let corpus = Corpus::unsplit(imgs, (0..n).map(|i| i.to_string()).collect());
            if let Ok(s) = split_corpus(&corpus, frac, seed) {
                let mut all: Vec<usize> = s.split.train.iter().chain(&s.split.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert!(!s.split.train.is_empty() && !s.split.test.is_empty());
            }
        }

        #[test]
        fn resize_of_constant_is_constant(h in 1usize..12, w in 1usize..12, o in 8usize..40, v in 0.0f64..1.0) {
            let out = resize_bilinear(&vec![v; h * w], h, w, 1, o, o);
            prop_assert!(out.iter().all(|x| *x == v));
        }
    }
}
