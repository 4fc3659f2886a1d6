//! Forward process statistics and regeneration quality of the trained model.

mod common;

use common::{lab, mean};
use wmlab::attacks::{guided_remove, regenerate, GuidedAttackConfig};
use wmlab::diffusion::{regeneration_psnr, DiffusionModel, LatentCodec};
use wmlab::ImageGrid;

fn model() -> &'static DiffusionModel {
    lab().model().expect("diffusion model loaded")
}

fn test_images(n: usize) -> Vec<&'static ImageGrid> {
    let lab = lab();
    lab.eval_indices().iter().take(n).map(|&i| &lab.corpus().images[i]).collect()
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a.iter().copied()), mean(b.iter().copied()));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn forward_noise_has_the_scheduled_variance() {
    let m = model();
    for t in [50, 300, 700] {
        let ab = m.schedule().alpha_bar(t).unwrap();
        let mut residuals = Vec::new();
        for (k, img) in test_images(20).into_iter().enumerate() {
            let x0 = LatentCodec.encode(img);
            let xt = m.add_noise(img, t, k as u64).unwrap();
            residuals.extend(xt.data.iter().zip(&x0.data).map(|(a, b)| (a - ab.sqrt() * b) / (1.0 - ab).sqrt()));
        }
        let var = mean(residuals.iter().map(|r| r * r));
        assert!((var - 1.0).abs() <= 0.05, "t={t}: noise variance {var}");
    }
}

#[test]
fn final_timestep_forgets_the_image() {
    let m = model();
    let t = m.schedule().len();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (k, img) in test_images(20).into_iter().enumerate() {
        a.extend(LatentCodec.encode(img).data);
        b.extend(m.add_noise(img, t, k as u64).unwrap().data);
    }
    let c = correlation(&a, &b);
    assert!(c.abs() < 0.1, "correlation with x0 at T is {c}");
}

#[test]
fn training_report_and_validation_loss() {
    let report = model().report().expect("trained model carries a report");
    assert!(report.validation_loss < 1.0, "validation loss {}", report.validation_loss);
    let images = test_images(50);
    let loss = model().epsilon_loss(&images, 3).unwrap();
    assert!(loss < 1.0, "held-out epsilon loss {loss}");
}

#[test]
fn trained_model_beats_an_untrained_one() {
    let m = model();
    let images = test_images(50);
    let untrained = DiffusionModel::initialise(m.config().clone(), 99).unwrap();
    let (good, bad) = (regeneration_psnr(m, &images, 0.3, 0).unwrap(), regeneration_psnr(&untrained, &images, 0.3, 0).unwrap());
    assert!(good >= bad + 6.0, "trained {good:.2} dB vs untrained {bad:.2} dB");
}

#[test]
fn regeneration_fidelity_falls_with_strength() {
    let m = model();
    let images = test_images(50);
    let light = regeneration_psnr(m, &images, 0.05, 0).unwrap();
    assert!(light >= 30.0, "PSNR at strength 0.05 is {light:.2} dB");
    let curve: Vec<f64> = [0.1, 0.2, 0.3, 0.5].iter().map(|s| regeneration_psnr(m, &images, *s, 0).unwrap()).collect();
    let inversions: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    assert!(
        inversions.len() <= 1 && inversions.iter().all(|d| *d <= 0.3),
        "PSNR curve {curve:?} is not decreasing"
    );
}

#[test]
fn full_strength_output_is_unrelated_to_the_input() {
    let m = model();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (k, img) in test_images(10).into_iter().enumerate() {
        a.extend_from_slice(img.data());
        b.extend(regenerate(m, img, 1.0, k as u64).unwrap().into_data());
    }
    let c = correlation(&a, &b);
    assert!(c.abs() < 0.2, "correlation at strength 1 is {c}");
}

#[test]
fn zero_guidance_equals_regeneration() {
    let lab = lab();
    let m = model();
    let decoder = lab.ss().expect("ss codec");
    let config = GuidedAttackConfig { lambda_weight: 0.0, gradient_steps: 2, strength: 0.2, target: None };
    for (k, img) in test_images(3).into_iter().enumerate() {
        let plain = regenerate(m, img, 0.2, k as u64).unwrap();
        let guided = guided_remove(m, img, &config, decoder, k as u64).unwrap();
        assert_eq!(plain, guided);
    }
}
