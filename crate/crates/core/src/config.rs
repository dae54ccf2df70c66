//! The single JSON config every CLI run and the service read.

use std::path::Path;

use reform_autodiff::OptimizerConfig;
use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::catalog::Attribute;
use crate::checkpoint::sha256_hex;
use crate::encoder::{EncodeConfig, EncodeInit, EncoderTrainConfig};
use crate::error::{CoreError, Result};
use crate::gan::GanConfig;
use crate::garment::SUPPORTED_SIZES;
use crate::perceptual::PerceptualConfig;
use crate::reformulator::{default_reform_optimizer, ClassifierConfig, LabelMode};
use crate::retrieval::DEFAULT_K;
use crate::stylegan::LatentSpace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub image_size: usize,
    pub latent_dim: usize,
    /// Weight of the realism term in the encoder objective.
    pub beta: f64,
    /// Perceptual layers compared by the encoder objective.
    pub layers: Vec<usize>,
    /// Encoder optimization.
    pub optimizer: OptimizerConfig,
    pub encode: EncodeSection,
    pub dataset: DatasetSection,
    pub gan: GanConfig,
    pub perceptual: PerceptualConfig,
    pub encoder: EncoderTrainConfig,
    pub classifier: ClassifierConfig,
    pub reform: ReformSection,
    pub bench: BenchSection,
    pub service: ServiceSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeSection {
    pub space: LatentSpace,
    pub init: EncodeInit,
    pub restarts: usize,
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Training images rendered for the GAN and the perceptual net.
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReformSection {
    pub optimizer: OptimizerConfig,
    pub lambda_anchor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub n_listings: usize,
    pub variants: usize,
    pub k: usize,
    pub attributes: Vec<Attribute>,
    pub hold_others: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub session_ttl_secs: u64,
    /// Listings in the catalog the service searches.
    pub catalog_listings: usize,
    pub catalog_variants: usize,
}

impl Default for Config {
    fn default() -> Self {
        let encode = EncodeConfig::default();
        Config {
            seed: 0,
            image_size: 32,
            latent_dim: 64,
            beta: encode.beta,
            layers: encode.layers.clone(),
            optimizer: encode.optimizer,
            encode: EncodeSection::default(),
            dataset: DatasetSection::default(),
            gan: GanConfig::default(),
            perceptual: PerceptualConfig::default(),
            encoder: EncoderTrainConfig::default(),
            classifier: ClassifierConfig::default(),
            reform: ReformSection::default(),
            bench: BenchSection::default(),
            service: ServiceSection::default(),
        }
    }
}

impl Default for EncodeSection {
    fn default() -> Self {
        let e = EncodeConfig::default();
        EncodeSection {
            space: e.space,
            init: e.init,
            restarts: e.restarts,
            patience: e.patience,
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { n_images: 4000 }
    }
}

impl Default for ReformSection {
    fn default() -> Self {
        ReformSection {
            optimizer: default_reform_optimizer(),
            lambda_anchor: 0.0,
        }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        BenchSection {
            n_listings: b.n_listings,
            variants: b.variants,
            k: DEFAULT_K,
            attributes: b.attributes,
            hold_others: b.hold_others,
        }
    }
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            session_ttl_secs: 30 * 60,
            catalog_listings: 50,
            catalog_variants: 2,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Config = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| CoreError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// sha256 of the canonical JSON form; names trained-model caches.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Sets the top-level seed; every stage derives its own streams from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn gan_config(&self) -> GanConfig {
        let mut g = self.gan.clone();
        g.seed = self.seed;
        g.generator.image_size = self.image_size;
        g.generator.latent_dim = self.latent_dim;
        g.discriminator.image_size = self.image_size;
        g
    }

    pub fn perceptual_config(&self) -> PerceptualConfig {
        PerceptualConfig {
            seed: self.seed,
            image_size: self.image_size,
            ..self.perceptual.clone()
        }
    }

    pub fn encode_config(&self) -> EncodeConfig {
        EncodeConfig {
            beta: self.beta,
            layers: self.layers.clone(),
            optimizer: self.optimizer,
            space: self.encode.space,
            init: self.encode.init,
            restarts: self.encode.restarts,
            patience: self.encode.patience,
            seed: self.seed,
            record_trajectory: false,
        }
    }

    pub fn encoder_train_config(&self) -> EncoderTrainConfig {
        let mut e = self.encoder.clone();
        e.seed = self.seed;
        e.space = self.encode.space;
        e.encode.beta = self.beta;
        e.encode.layers = self.layers.clone();
        e.encode.space = self.encode.space;
        e.encode.seed = self.seed;
        e
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            seed: self.seed,
            ..self.classifier.clone()
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            seed: self.seed,
            n_listings: self.bench.n_listings,
            variants: self.bench.variants,
            k: self.bench.k,
            attributes: self.bench.attributes.clone(),
            encode: self.encode_config(),
            reform: self.reform.optimizer,
            lambda_anchor: self.reform.lambda_anchor,
            hold_others: self.bench.hold_others,
        }
    }

    /// Rejects out-of-range values before any work starts.
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_SIZES.contains(&self.image_size) {
            return Err(CoreError::InvalidConfig(format!(
                "image_size {} not in {SUPPORTED_SIZES:?}",
                self.image_size
            )));
        }
        if self.latent_dim == 0 {
            return Err(CoreError::InvalidConfig("latent_dim must be positive".into()));
        }
        if self.dataset.n_images == 0 {
            return Err(CoreError::InvalidConfig("dataset.n_images must be positive".into()));
        }
        if self.service.session_ttl_secs == 0 || self.service.catalog_listings == 0 || self.service.catalog_variants == 0 {
            return Err(CoreError::InvalidConfig("service TTL and catalog sizes must be positive".into()));
        }
        let gan = self.gan_config();
        gan.validate()?;
        gan.generator.validate()?;
        if self.classifier.mode == LabelMode::SelfLabeled && self.encode.space != LatentSpace::W {
            return Err(CoreError::InvalidConfig("a self-labeled classifier works on W codes; set encode.space to W".into()));
        }
        self.encode_config().validate()?;
        self.encoder_train_config().encode.validate()?;
        self.bench_config().validate()?;
        self.reform.optimizer.validate()?;
        if !(self.reform.lambda_anchor >= 0.0 && self.reform.lambda_anchor.is_finite()) {
            return Err(CoreError::InvalidConfig("reform.lambda_anchor must be non-negative".into()));
        }
        let p = self.perceptual_config();
        if p.steps == 0 || p.batch_size == 0 || !(0.0..1.0).contains(&p.holdout_fraction) {
            return Err(CoreError::InvalidConfig("perceptual steps, batch size or holdout out of range".into()));
        }
        let c = self.classifier_config();
        if c.steps == 0 || c.batch_size == 0 || c.n_samples < 10 || !(0.0..1.0).contains(&c.holdout_fraction) {
            return Err(CoreError::InvalidConfig("classifier steps, batch size, samples or holdout out of range".into()));
        }
        if !(0.0..0.5).contains(&c.label_smoothing) {
            return Err(CoreError::InvalidConfig("classifier.label_smoothing must be in [0, 0.5)".into()));
        }
        let e = &self.encoder;
        if e.steps == 0 || e.batch_size == 0 || e.n_pairs < 10 || !(0.0..1.0).contains(&e.holdout_fraction) {
            return Err(CoreError::InvalidConfig("encoder steps, batch size, pairs or holdout out of range".into()));
        }
        Ok(())
    }
}
