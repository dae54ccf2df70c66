//! Adversarial training: non-saturating logistic loss with a lazy R1
//! penalty on real images.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use reform_autodiff::optim::{step, step_scaled};
use reform_autodiff::rng::substream;
use reform_autodiff::{Gradients, OptimizerConfig, OptimizerState, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::stylegan::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Learning-rate multiplier for the mapping network.
    pub mapping_lr_mult: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub r1_gamma: f64,
    /// R1 is evaluated every this many steps and scaled up to match.
    pub r1_interval: usize,
    pub w_mean_decay: f64,
    pub collapse_threshold: f64,
    pub collapse_patience: usize,
    pub min_images: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            seed: 0,
            steps: 10_000,
            batch_size: 16,
            lr_generator: 0.002,
            lr_discriminator: 0.002,
            mapping_lr_mult: 0.1,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            r1_gamma: 1.0,
            r1_interval: 4,
            w_mean_decay: 0.995,
            collapse_threshold: 1e-4,
            collapse_patience: 500,
            min_images: 2000,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.r1_interval == 0 || self.collapse_patience == 0 {
            return Err(CoreError::InvalidConfig("batch size, R1 interval and collapse patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.w_mean_decay) {
            return Err(CoreError::InvalidConfig(format!("w_mean decay {} outside [0, 1)", self.w_mean_decay)));
        }
        if self.generator.image_size != self.discriminator.image_size {
            return Err(CoreError::InvalidConfig("generator and discriminator image sizes differ".into()));
        }
        self.optimizer(self.lr_generator).validate()?;
        self.optimizer(self.lr_discriminator).validate()?;
        Ok(())
    }

    fn optimizer(&self, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            ..OptimizerConfig::adam(lr, self.steps)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub d_loss: f32,
    pub g_loss: f32,
    /// Present on steps where the penalty was evaluated.
    pub r1: Option<f32>,
}

pub struct TrainedGan {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub log: Vec<StepLog>,
}

fn scalar(tape: &Tape, v: reform_autodiff::Var) -> f32 {
    tape.value(v).data()[0]
}

fn add_into(acc: &mut [Tensor], other: &[Tensor], k: f32) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += k * y;
        }
    }
}

/// Gradient of the mean discriminator R1 penalty `gamma/2 * |grad_x D|^2`
/// with respect to the discriminator weights, via a central difference of
/// weight gradients along the input gradient. Returns `(grads, penalty)`.
fn r1_gradients(d: &Discriminator, reals: &Tensor, gamma: f64) -> Result<(Vec<Tensor>, f32)> {
    let n = reals.shape()[0] as f64;
    let input_grad = {
        let mut tape = Tape::new();
        let p = d.params.bind(&mut tape, false)?;
        let x = tape.leaf(reals.clone(), true)?;
        let logits = d.forward(&mut tape, &p, x)?;
        let s = tape.sum(logits)?;
        tape.backward(s)?.wrt(x)
    };
    let penalty = (gamma / 2.0 * input_grad.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n) as f32;
    let peak = input_grad.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Ok((d.params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(), penalty));
    }
    let eps = 0.01 / peak;
    let weight_grads = |sign: f32| -> Result<Vec<Tensor>> {
        let shifted = Tensor::new(
            reals.shape().to_vec(),
            reals.data().iter().zip(input_grad.data()).map(|(&x, &g)| x + sign * eps * g).collect(),
        )?;
        let mut tape = Tape::new();
        let p = d.params.bind(&mut tape, true)?;
        let x = tape.constant(shifted)?;
        let logits = d.forward(&mut tape, &p, x)?;
        let s = tape.sum(logits)?;
        Ok(p.grads(&tape.backward(s)?))
    };
    let mut out = weight_grads(1.0)?;
    add_into(&mut out, &weight_grads(-1.0)?, -1.0);
    let k = (gamma / (n * 2.0 * eps as f64)) as f32;
    for t in &mut out {
        for v in t.data_mut() {
            *v *= k;
        }
    }
    Ok((out, penalty))
}

fn latent_batch(rng: &mut reform_autodiff::rng::Rng, n: usize, dim: usize) -> Tensor {
    Tensor::from_fn([n, dim], |_| StandardNormal.sample(rng))
}

/// Trains a generator/discriminator pair on `images`.
pub fn train_gan(images: &[Image], config: &GanConfig) -> Result<TrainedGan> {
    config.validate()?;
    if images.len() < config.min_images {
        return Err(CoreError::InvalidArgument(format!(
            "GAN training needs at least {} images, got {}",
            config.min_images,
            images.len()
        )));
    }
    if images.iter().any(|im| im.size() != config.generator.image_size) {
        return Err(CoreError::InvalidArgument("dataset image size differs from the model".into()));
    }
    let mut g = Generator::new(config.generator.clone(), config.seed)?;
    let mut d = Discriminator::new(config.discriminator.clone(), config.seed)?;
    let mut rng = substream(config.seed, "gan-train");
    let (g_opt, d_opt) = (config.optimizer(config.lr_generator), config.optimizer(config.lr_discriminator));
    let (mut g_state, mut d_state) = (OptimizerState::new(), OptimizerState::new());
    let g_lr_scale: Vec<f64> = g
        .mapping_param_mask()
        .iter()
        .map(|&m| if m { config.mapping_lr_mult } else { 1.0 })
        .collect();
    let (b, zdim, wdim) = (config.batch_size, config.generator.latent_dim, config.generator.w_dim);
    let mut ema = vec![0.0f64; wdim];
    let mut ema_weight = 1.0f64;
    let mut low_loss_run = 0usize;
    let mut log = Vec::with_capacity(config.steps);
    let started = Instant::now();

    for it in 0..config.steps {
        // Discriminator update.
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..images.len())).collect();
        let picked: Vec<Image> = idx.iter().map(|&i| images[i].clone()).collect();
        let reals = Image::batch(&picked)?;
        let fakes = {
            let z = latent_batch(&mut rng, b, zdim);
            let mut tape = Tape::new();
            let p = g.params.bind(&mut tape, false)?;
            let zv = tape.constant(z)?;
            let w = g.map_var(&mut tape, &p, zv)?;
            let x = g.synthesize_var(&mut tape, &p, w)?;
            tape.value(x).clone()
        };
        let (mut d_grads, d_loss) = {
            let mut tape = Tape::new();
            let p = d.params.bind(&mut tape, true)?;
            let xr = tape.constant(reals.clone())?;
            let xf = tape.constant(fakes)?;
            let lr = d.forward(&mut tape, &p, xr)?;
            let lf = d.forward(&mut tape, &p, xf)?;
            let neg = tape.scale(lr, -1.0)?;
            let real_term = tape.softplus(neg)?;
            let real_term = tape.mean(real_term)?;
            let fake_term = tape.softplus(lf)?;
            let fake_term = tape.mean(fake_term)?;
            let loss = tape.add(real_term, fake_term)?;
            let grads: Gradients<f32> = tape.backward(loss)?;
            (p.grads(&grads), scalar(&tape, loss))
        };
        let r1 = if config.r1_gamma > 0.0 && it % config.r1_interval == 0 {
            let (r1_grads, penalty) = r1_gradients(&d, &reals, config.r1_gamma * config.r1_interval as f64)?;
            add_into(&mut d_grads, &r1_grads, 1.0);
            Some(penalty / config.r1_interval as f32)
        } else {
            None
        };
        step(d.params.tensors_mut(), &d_grads, &d_opt, &mut d_state)?;

        // Generator update.
        let (g_grads, g_loss, w_batch) = {
            let z = latent_batch(&mut rng, b, zdim);
            let mut tape = Tape::new();
            let gp = g.params.bind(&mut tape, true)?;
            let dp = d.params.bind(&mut tape, false)?;
            let zv = tape.constant(z)?;
            let w = g.map_var(&mut tape, &gp, zv)?;
            let x = g.synthesize_var(&mut tape, &gp, w)?;
            let logits = d.forward(&mut tape, &dp, x)?;
            let neg = tape.scale(logits, -1.0)?;
            let sp = tape.softplus(neg)?;
            let loss = tape.mean(sp)?;
            let grads = tape.backward(loss)?;
            (gp.grads(&grads), scalar(&tape, loss), tape.value(w).clone())
        };
        step_scaled(g.params.tensors_mut(), &g_grads, &g_opt, &mut g_state, Some(&g_lr_scale))?;

        let decay = config.w_mean_decay;
        ema_weight *= decay;
        for (j, e) in ema.iter_mut().enumerate() {
            let mean = (0..b).map(|i| w_batch.data()[i * wdim + j] as f64).sum::<f64>() / b as f64;
            *e = decay * *e + (1.0 - decay) * mean;
        }
        let correction = 1.0 - ema_weight;
        g.w_mean = ema.iter().map(|&e| (e / correction) as f32).collect();

        if !d_loss.is_finite() || !g_loss.is_finite() {
            return Err(CoreError::NonFinite(format!("GAN loss became non-finite at step {it}")));
        }
        if (d_loss as f64) < config.collapse_threshold {
            low_loss_run += 1;
            if low_loss_run >= config.collapse_patience {
                return Err(CoreError::ModeCollapse {
                    threshold: config.collapse_threshold,
                    steps: config.collapse_patience,
                });
            }
        } else {
            low_loss_run = 0;
        }
        if it % 100 == 0 || it + 1 == config.steps {
            tracing::info!(
                step = it,
                d_loss,
                g_loss,
                r1 = r1.unwrap_or(f32::NAN),
                elapsed_s = started.elapsed().as_secs_f64(),
                "gan step"
            );
        }
        log.push(StepLog {
            step: it,
            d_loss,
            g_loss,
            r1,
        });
    }
    Ok(TrainedGan {
        generator: g,
        discriminator: d,
        log,
    })
}

/// Fraction of `real` and `fake` images the discriminator classifies
/// correctly at logit threshold 0.
pub fn discriminator_accuracy(d: &Discriminator, real: &[Image], fake: &[Image]) -> Result<f32> {
    let r = d.logits(real)?;
    let f = d.logits(fake)?;
    let correct = r.iter().filter(|&&v| v > 0.0).count() + f.iter().filter(|&&v| v <= 0.0).count();
    Ok(correct as f32 / (r.len() + f.len()) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::labeled_dataset;

    fn tiny() -> GanConfig {
        GanConfig {
            steps: 6,
            batch_size: 4,
            min_images: 8,
            ..Default::default()
        }
    }

    fn data(n: usize) -> Vec<Image> {
        labeled_dataset(1, n, 32).unwrap().into_iter().map(|l| l.image).collect()
    }

    #[test]
    fn too_few_images_rejected() {
        let err = train_gan(&data(10), &GanConfig::default()).err().unwrap();
        assert!(err.to_string().contains("2000"));
    }

    #[test]
    fn fixed_seed_identical_weights() {
        let imgs = data(16);
        let a = train_gan(&imgs, &tiny()).unwrap();
        let b = train_gan(&imgs, &tiny()).unwrap();
        assert_eq!(a.generator.params, b.generator.params);
        assert_eq!(a.discriminator.params, b.discriminator.params);
        assert_eq!(a.generator.w_mean, b.generator.w_mean);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 6);
        assert!(a.log[0].r1.is_some() && a.log[1].r1.is_none());
    }

    #[test]
    fn collapse_detection() {
        let cfg = GanConfig {
            collapse_threshold: 1e9,
            collapse_patience: 3,
            ..tiny()
        };
        let err = train_gan(&data(16), &cfg).err().unwrap();
        assert!(err.to_string().contains("mode collapse suspected"), "{err}");
    }

    #[test]
    fn r1_gradient_matches_direct_difference() {
        // Perturb single head weights and recompute gamma/2 * mean |grad_x D|^2.
        let d = Discriminator::new(DiscriminatorConfig::default(), 3).unwrap();
        let reals = Image::batch(&data(2)).unwrap();
        let (grads, _) = r1_gradients(&d, &reals, 1.0).unwrap();
        let penalty = |d: &Discriminator| -> f64 {
            let mut tape = Tape::new();
            let p = d.params.bind(&mut tape, false).unwrap();
            let x = tape.leaf(reals.clone(), true).unwrap();
            let l = d.forward(&mut tape, &p, x).unwrap();
            let s = tape.sum(l).unwrap();
            let g = tape.backward(s).unwrap().wrt(x);
            0.5 * g.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 2.0
        };
        let head_weight = d.params.len() - 2;
        for k in [0usize, 5, 17] {
            let h = 1e-2f32;
            let mut plus = d.clone();
            plus.params.tensors_mut()[head_weight].data_mut()[k] += h;
            let mut minus = d.clone();
            minus.params.tensors_mut()[head_weight].data_mut()[k] -= h;
            let numeric = (penalty(&plus) - penalty(&minus)) / (2.0 * h as f64);
            let analytic = grads[head_weight].data()[k] as f64;
            assert!(
                (numeric - analytic).abs() <= 0.05 * numeric.abs().max(analytic.abs()) + 1e-5,
                "k={k}: {numeric} vs {analytic}"
            );
        }
    }

    #[test]
    fn untrained_discriminator_near_chance() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 0).unwrap();
        let g = Generator::new(GeneratorConfig::default(), 0).unwrap();
        let fake = g.sample(&mut reform_autodiff::rng::seeded(1), 100, 1.0).unwrap();
        let acc = discriminator_accuracy(&d, &data(100), &fake).unwrap();
        assert!((acc - 0.5).abs() <= 0.1, "{acc}");
    }
}
