//! Training stages over a models directory, and loading the trained set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bench::BenchModels;
use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::config::Config;
use crate::dataset::{labeled_dataset, LabeledImage};
use crate::encoder::{train_feedforward_encoder, FeedforwardEncoder, Models};
use crate::error::{CoreError, Result};
use crate::gan::train_gan;
use crate::image::Image;
use crate::perceptual::{train_perceptual, PerceptualModel};
use crate::reformulator::{train_attribute_classifier, AttributeClassifier, LabelMode};
use crate::stylegan::{Discriminator, Generator};

pub const GENERATOR_FILE: &str = "generator.lrw";
pub const DISCRIMINATOR_FILE: &str = "discriminator.lrw";
pub const PERCEPTUAL_FILE: &str = "perceptual.lrw";
pub const ENCODER_FILE: &str = "encoder.lrw";
pub const CLASSIFIER_FILE: &str = "classifier.lrw";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Gan,
    Perceptual,
    Encoder,
    Classifier,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Gan, Stage::Perceptual, Stage::Encoder, Stage::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gan => "gan",
            Stage::Perceptual => "perceptual",
            Stage::Encoder => "encoder",
            Stage::Classifier => "classifier",
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Gan => &[GENERATOR_FILE, DISCRIMINATOR_FILE],
            Stage::Perceptual => &[PERCEPTUAL_FILE],
            Stage::Encoder => &[ENCODER_FILE],
            Stage::Classifier => &[CLASSIFIER_FILE],
        }
    }

    pub fn report_file(self) -> String {
        format!("{}_report.json", self.name())
    }

    pub fn is_done(self, dir: &Path) -> bool {
        self.outputs().iter().all(|f| dir.join(f).is_file()) && dir.join(self.report_file()).is_file()
    }
}

/// The rendered images the GAN and the perceptual net train on.
pub fn training_images(cfg: &Config) -> Result<Vec<LabeledImage>> {
    labeled_dataset(cfg.seed, cfg.dataset.n_images, cfg.image_size)
}

fn load<T>(dir: &Path, file: &str, f: impl FnOnce(&Checkpoint) -> Result<T>) -> Result<T> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(CoreError::Checkpoint(format!("{} not found; train it first", path.display())));
    }
    f(&Checkpoint::load(&path)?)
}

fn write_report(dir: &Path, stage: Stage, cfg: &Config, report: &impl Serialize) -> Result<()> {
    let doc = serde_json::json!({
        "stage": stage.name(),
        "seed": cfg.seed,
        "report": report,
        "config": cfg,
    });
    std::fs::write(dir.join(stage.report_file()), serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}

/// Runs one stage, writing its checkpoints and `<stage>_report.json` to
/// `dir`. Earlier stages' checkpoints must already be there.
pub fn run_stage(stage: Stage, cfg: &Config, dir: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    tracing::info!(stage = stage.name(), seed = cfg.seed, "training stage");
    match stage {
        Stage::Gan => {
            let data = training_images(cfg)?;
            let images: Vec<Image> = data.into_iter().map(|l| l.image).collect();
            let trained = train_gan(&images, &cfg.gan_config())?;
            trained.generator.to_checkpoint()?.save(dir.join(GENERATOR_FILE))?;
            trained.discriminator.to_checkpoint()?.save(dir.join(DISCRIMINATOR_FILE))?;
            let tail = &trained.log[trained.log.len().saturating_sub(100)..];
            let mean = |f: fn(&crate::gan::StepLog) -> f32| tail.iter().map(f).sum::<f32>() / tail.len().max(1) as f32;
            let report = serde_json::json!({
                "steps": trained.log.len(),
                "final_d_loss": mean(|l| l.d_loss),
                "final_g_loss": mean(|l| l.g_loss),
            });
            write_report(dir, stage, cfg, &report)
        }
        Stage::Perceptual => {
            let data = training_images(cfg)?;
            let (model, report) = train_perceptual(&data, &cfg.perceptual_config())?;
            model.to_checkpoint()?.save(dir.join(PERCEPTUAL_FILE))?;
            write_report(dir, stage, cfg, &report)
        }
        Stage::Encoder => {
            let g = load(dir, GENERATOR_FILE, Generator::from_checkpoint)?;
            let d = load(dir, DISCRIMINATOR_FILE, Discriminator::from_checkpoint)?;
            let v = load(dir, PERCEPTUAL_FILE, PerceptualModel::from_checkpoint)?;
            let models = Models { generator: &g, discriminator: &d, perceptual: &v };
            let (enc, report) = train_feedforward_encoder(models, &cfg.encoder_train_config())?;
            enc.to_checkpoint()?.save(dir.join(ENCODER_FILE))?;
            write_report(dir, stage, cfg, &report)
        }
        Stage::Classifier => {
            let g = load(dir, GENERATOR_FILE, Generator::from_checkpoint)?;
            let ccfg = cfg.classifier_config();
            let (ff, report) = match ccfg.mode {
                LabelMode::SelfLabeled => train_attribute_classifier(&g, &ccfg, None, None)?,
                LabelMode::EncodedReal => {
                    let enc = load(dir, ENCODER_FILE, FeedforwardEncoder::from_checkpoint)?;
                    let data = labeled_dataset(cfg.seed, ccfg.n_samples, cfg.image_size)?;
                    train_attribute_classifier(&g, &ccfg, Some(&enc), Some(&data))?
                }
            };
            ff.to_checkpoint()?.save(dir.join(CLASSIFIER_FILE))?;
            write_report(dir, stage, cfg, &report)
        }
    }
}

/// Runs every stage whose outputs are missing from `dir`, in order.
pub fn ensure_trained(cfg: &Config, dir: &Path) -> Result<Vec<Stage>> {
    let mut ran = Vec::new();
    for stage in Stage::ALL {
        if !stage.is_done(dir) {
            run_stage(stage, cfg, dir)?;
            ran.push(stage);
        }
    }
    Ok(ran)
}

/// Every trained model, loaded from a models directory.
pub struct ModelSet {
    pub dir: PathBuf,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub perceptual: PerceptualModel,
    pub classifier: AttributeClassifier,
    /// Optional; only the fast encode path needs it.
    pub encoder: Option<FeedforwardEncoder>,
    /// sha256 of each checkpoint file, by file name.
    pub hashes: BTreeMap<String, String>,
}

impl ModelSet {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut hashes = BTreeMap::new();
        for file in [GENERATOR_FILE, DISCRIMINATOR_FILE, PERCEPTUAL_FILE, CLASSIFIER_FILE, ENCODER_FILE] {
            let path = dir.join(file);
            if path.is_file() {
                hashes.insert(file.to_string(), sha256_hex(&std::fs::read(&path)?));
            }
        }
        let encoder = if dir.join(ENCODER_FILE).is_file() {
            Some(load(dir, ENCODER_FILE, FeedforwardEncoder::from_checkpoint)?)
        } else {
            None
        };
        let set = ModelSet {
            dir: dir.to_path_buf(),
            generator: load(dir, GENERATOR_FILE, Generator::from_checkpoint)?,
            discriminator: load(dir, DISCRIMINATOR_FILE, Discriminator::from_checkpoint)?,
            perceptual: load(dir, PERCEPTUAL_FILE, PerceptualModel::from_checkpoint)?,
            classifier: load(dir, CLASSIFIER_FILE, AttributeClassifier::from_checkpoint)?,
            encoder,
            hashes,
        };
        let size = set.generator.config.image_size;
        if set.discriminator.config.image_size != size || set.perceptual.config.image_size != size {
            return Err(CoreError::Checkpoint("checkpoints disagree on image size".into()));
        }
        Ok(set)
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            generator: &self.generator,
            discriminator: &self.discriminator,
            perceptual: &self.perceptual,
        }
    }

    pub fn bench_models(&self) -> BenchModels<'_> {
        BenchModels {
            models: self.models(),
            classifier: &self.classifier,
        }
    }

    pub fn image_size(&self) -> usize {
        self.generator.config.image_size
    }
}
