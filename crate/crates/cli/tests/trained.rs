//! Properties of the trained model set. Shares the acceptance model cache,
//! so the first run trains it.

use reform_autodiff::rng::{substream, uniform_tensor};
use reform_autodiff::OptimizerConfig;
use reform_core::dataset::labeled_dataset;
use reform_core::encoder::{encode_optimize, EncodeConfig, EncodeInit};
use reform_core::garment::hue_distance;
use reform_core::image::Image;
use reform_core::oracle::{extract_attributes, AttributeReadout};
use reform_core::pipeline::Stage;
use reform_core::reformulator::{classifier_pairs, fit_classifier, reformulate, AttributeTarget, ClassifierConfig};
use reform_core::stylegan::{sample_z, LatentCode, LatentSpace};

mod common;
use common::{stage_report, trained_models};

fn within(a: &AttributeReadout, b: &AttributeReadout, tol: f32) -> bool {
    hue_distance(a.hue_est, b.hue_est) <= tol
        && (a.length_est - b.length_est).abs() <= tol
        && (a.stripedness_est - b.stripedness_est).abs() <= tol
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

#[test]
fn w_mean_tracks_the_monte_carlo_mean() {
    let (cfg, models, _) = trained_models().unwrap();
    let g = &models.generator;
    let mut rng = substream(cfg.seed, "test/w-mean");
    let dim = g.config.w_dim;
    let mut mean = vec![0f64; dim];
    for _ in 0..1000 {
        let w = g.map_latent(&sample_z(&mut rng, g.config.latent_dim)).unwrap();
        for (m, v) in mean.iter_mut().zip(&w.values) {
            *m += *v as f64 / 1000.0;
        }
    }
    let stored = g.w_mean_code();
    let worst = mean.iter().zip(&stored.values).map(|(a, &b)| (a - b as f64).abs()).fold(0.0, f64::max);
    assert!(worst <= 0.05, "worst coordinate gap {worst}");
}

#[test]
fn synthesis_is_locally_lipschitz() {
    let (cfg, models, _) = trained_models().unwrap();
    let g = &models.generator;
    let mut rng = substream(cfg.seed, "test/lipschitz");
    let norm = |a: &Image, b: &Image| a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
    // L from coarse steps, then every fine step must respect it.
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    for i in 0..20 {
        let w = g.map_latent(&sample_z(&mut rng, g.config.latent_dim)).unwrap();
        let base = g.synthesize(&w).unwrap();
        let j = (i * 7) % w.dim();
        for (eps, out) in [(1e-2f32, &mut coarse), (1e-3, &mut fine)] {
            let mut moved = w.values.clone();
            moved[j] += eps;
            let img = g.synthesize(&LatentCode::new(LatentSpace::W, moved).unwrap()).unwrap();
            out.push(norm(&base, &img) / eps as f64);
        }
    }
    let lipschitz = coarse.iter().copied().fold(0.0, f64::max);
    assert!(lipschitz.is_finite() && lipschitz > 0.0);
    for r in &fine {
        assert!(*r <= 2.0 * lipschitz, "ratio {r} vs L {lipschitz}");
    }
}

#[test]
fn perceptual_loss_grows_with_noise() {
    let (cfg, models, _) = trained_models().unwrap();
    let v = &models.perceptual;
    let data = labeled_dataset(cfg.seed + 1, 100, cfg.image_size).unwrap();
    let mut rng = substream(cfg.seed, "test/noise");
    let noisy = |img: &Image, sigma: f64, rng: &mut reform_autodiff::rng::Rng| {
        let n = uniform_tensor::<f32>(rng, vec![img.data().len()], -1.0, 1.0);
        // Uniform on [-1, 1] scaled to standard deviation sigma.
        let s = (sigma * 3f64.sqrt()) as f32;
        Image::new(img.size(), img.data().iter().zip(n.data()).map(|(p, e)| p + s * e).collect()).unwrap()
    };
    let mut ok = 0;
    for l in &data {
        let big = v.perceptual_loss(&l.image, &noisy(&l.image, 0.1, &mut rng), &cfg.layers).unwrap();
        let small = v.perceptual_loss(&l.image, &noisy(&l.image, 0.01, &mut rng), &cfg.layers).unwrap();
        ok += (big > small) as usize;
    }
    assert!(ok >= 95, "{ok}/100");
}

#[test]
fn training_reports_meet_their_ceilings() {
    let (_, models, _) = trained_models().unwrap();
    let p = stage_report(&models, Stage::Perceptual).unwrap();
    assert!(p["length_mae"].as_f64().unwrap() < 0.1, "{p}");
    let e = stage_report(&models, Stage::Encoder).unwrap();
    assert!(e["validation_relative_error"].as_f64().unwrap() < 0.2, "{e}");
    let c = stage_report(&models, Stage::Classifier).unwrap();
    let names = c["names"].as_array().unwrap();
    let length = names.iter().position(|n| n == "length").unwrap();
    assert!(c["mae"][length].as_f64().unwrap() < 0.15, "{c}");
}

#[test]
fn feedforward_encoding_preserves_attributes() {
    let (cfg, models, _) = trained_models().unwrap();
    let g = &models.generator;
    let enc = models.encoder.as_ref().unwrap();
    let mut rng = substream(cfg.seed, "test/encoder-round-trip");
    let mut ok = 0;
    for _ in 0..100 {
        let x = g.synthesize(&g.map_latent(&sample_z(&mut rng, g.config.latent_dim)).unwrap()).unwrap();
        let xh = g.synthesize(&enc.encode_fast(&x).unwrap()).unwrap();
        ok += match (extract_attributes(&x), extract_attributes(&xh)) {
            (Ok(a), Ok(b)) => within(&a, &b, 0.15),
            _ => false,
        } as usize;
    }
    assert!(ok >= 80, "{ok}/100");
}

#[test]
fn warm_start_is_no_worse_than_w_mean_start() {
    let (cfg, models, _) = trained_models().unwrap();
    let enc = models.encoder.as_ref().unwrap();
    let data = labeled_dataset(cfg.seed + 2, 50, cfg.image_size).unwrap();
    let base = EncodeConfig {
        optimizer: OptimizerConfig { tolerance: 0.0, ..OptimizerConfig::adam(0.05, 50) },
        restarts: 1,
        patience: 50,
        ..cfg.encode_config()
    };
    let warm_cfg = EncodeConfig { init: EncodeInit::EncoderWarmStart, ..base.clone() };
    let cold_cfg = EncodeConfig { init: EncodeInit::WMean, ..base };
    let mut ok = 0;
    for l in &data {
        let warm = encode_optimize(&l.image, models.models(), &warm_cfg, Some(enc)).unwrap();
        let cold = encode_optimize(&l.image, models.models(), &cold_cfg, None).unwrap();
        ok += (warm.final_loss <= cold.final_loss) as usize;
    }
    assert!(ok >= 35, "{ok}/50");
}

#[test]
fn classifier_accuracy_is_insensitive_to_training_order() {
    let (cfg, models, _) = trained_models().unwrap();
    let ccfg = ClassifierConfig {
        n_samples: 1500,
        steps: 1000,
        ..cfg.classifier_config()
    };
    let (codes, labels, skipped) = classifier_pairs(&models.generator, &ccfg, None, None).unwrap();
    let n_train = codes.len() - ((codes.len() as f32 * ccfg.holdout_fraction).round() as usize);
    // Reverse the training portion; the held-out tail stays put.
    let mut codes_r = codes.clone();
    let mut labels_r = labels.clone();
    codes_r[..n_train].reverse();
    labels_r[..n_train].reverse();
    let (_, a) = fit_classifier(&codes, &labels, LatentSpace::W, &ccfg, skipped).unwrap();
    let (_, b) = fit_classifier(&codes_r, &labels_r, LatentSpace::W, &ccfg, skipped).unwrap();
    for ((name, x), y) in a.names.iter().zip(&a.mae).zip(&b.mae) {
        assert!((x - y).abs() < 0.03, "{name}: {x} vs {y}");
    }
}

#[test]
fn anchor_reduces_hue_drift() {
    let (cfg, models, _) = trained_models().unwrap();
    let g = &models.generator;
    let ff = &models.classifier;
    let mut rng = substream(cfg.seed, "test/anchor");
    let target = AttributeTarget::single(&ff.names, "length", 0.9).unwrap();
    let (mut free, mut anchored) = (Vec::new(), Vec::new());
    while free.len() < 30 {
        let w = g.map_latent(&sample_z(&mut rng, g.config.latent_dim)).unwrap();
        let Ok(a) = extract_attributes(&g.synthesize(&w).unwrap()) else { continue };
        if a.length_est > 0.6 {
            continue;
        }
        let drift = |lambda: f64| {
            let r = reformulate(&w, ff, &target, &cfg.reform.optimizer, lambda).unwrap();
            extract_attributes(&g.synthesize(&r.code).unwrap()).map(|b| hue_distance(a.hue_est, b.hue_est)).unwrap_or(0.5)
        };
        free.push(drift(0.0));
        anchored.push(drift(0.1));
    }
    let (f, a) = (median(free), median(anchored));
    assert!(a < f, "median hue drift anchored {a} vs free {f}");
}
