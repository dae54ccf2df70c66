//! GAN inversion: per-image latent optimization against perceptual and
//! realism losses, plus a trained feedforward shortcut.

use rand::seq::SliceRandom;
use reform_autodiff::optim::step;
use reform_autodiff::rng::{normal_tensor, substream};
use reform_autodiff::{AutodiffError, OptimizerConfig, OptimizerState, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::nn::{lrelu_gain, Conv, Dense};
use crate::perceptual::{validate_layers, PerceptualModel};
use crate::stylegan::{expect_kind, sample_z, Discriminator, Generator, LatentCode, LatentSpace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeInit {
    WMean,
    Random,
    EncoderWarmStart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeConfig {
    pub beta: f64,
    pub layers: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub space: LatentSpace,
    pub init: EncodeInit,
    pub restarts: usize,
    /// Stop after this many consecutive steps improving by less than the tolerance.
    pub patience: usize,
    pub seed: u64,
    pub record_trajectory: bool,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig {
            beta: 0.05,
            layers: vec![1, 2, 3],
            optimizer: OptimizerConfig {
                tolerance: 1e-6,
                ..OptimizerConfig::adam(0.05, 500)
            },
            space: LatentSpace::W,
            init: EncodeInit::WMean,
            restarts: 3,
            patience: 20,
            seed: 0,
            record_trajectory: false,
        }
    }
}

impl EncodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CoreError::InvalidConfig(format!("beta {} must be non-negative", self.beta)));
        }
        if self.restarts == 0 {
            return Err(CoreError::InvalidConfig("restarts must be at least 1".into()));
        }
        validate_layers(&self.layers)?;
        self.optimizer.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeResult {
    pub code: LatentCode,
    pub final_loss: f64,
    pub perceptual_term: f64,
    pub realism_term: f64,
    pub steps_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<f64>>,
}

/// Models the objective is evaluated against.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub generator: &'a Generator,
    pub discriminator: &'a Discriminator,
    pub perceptual: &'a PerceptualModel,
}

impl Models<'_> {
    pub fn code_dim(&self, space: LatentSpace) -> usize {
        match space {
            LatentSpace::Z => self.generator.config.latent_dim,
            LatentSpace::W => self.generator.config.w_dim,
        }
    }

    /// Image for a code in either space.
    pub fn render(&self, code: &LatentCode) -> Result<Image> {
        match code.space {
            LatentSpace::W => self.generator.synthesize(code),
            LatentSpace::Z => self.generator.synthesize(&self.generator.map_latent(code)?),
        }
    }
}

struct Evaluation {
    perceptual: f64,
    realism: f64,
    grad: Option<Tensor>,
}

/// Target features are recomputed per call; they are cheap next to the generator.
fn evaluate(
    models: Models<'_>,
    x: &Tensor,
    code: &Tensor,
    space: LatentSpace,
    cfg: &EncodeConfig,
    with_grad: bool,
) -> Result<Evaluation> {
    let (g, d, v) = (models.generator, models.discriminator, models.perceptual);
    let mut tape = Tape::new();
    let gp = g.params.bind(&mut tape, false)?;
    let dp = d.params.bind(&mut tape, false)?;
    let vp = v.params.bind(&mut tape, false)?;
    let c = tape.leaf(code.clone(), with_grad)?;
    let w = match space {
        LatentSpace::W => c,
        LatentSpace::Z => g.map_var(&mut tape, &gp, c)?,
    };
    let xhat = g.synthesize_var(&mut tape, &gp, w)?;
    let upto = *cfg.layers.iter().max().expect("validated");
    let xv = tape.constant(x.clone())?;
    let target: Vec<Var> = v.features_var(&mut tape, &vp, xv, upto)?;
    let perceptual = v.loss_against(&mut tape, &vp, &target, xhat, &cfg.layers)?;
    let logit = d.forward(&mut tape, &dp, xhat)?;
    let neg = tape.scale(logit, -1.0)?;
    let realism = tape.softplus(neg)?;
    let realism = tape.mean(realism)?;
    let weighted = tape.scale(realism, cfg.beta)?;
    let loss = tape.add(perceptual, weighted)?;
    let grad = if with_grad { Some(tape.backward(loss)?.wrt(c)) } else { None };
    Ok(Evaluation {
        perceptual: tape.value(perceptual).data()[0] as f64,
        realism: tape.value(realism).data()[0] as f64,
        grad,
    })
}

fn total(cfg: &EncodeConfig, e: &Evaluation) -> f64 {
    e.perceptual + cfg.beta * e.realism
}

fn run_once(models: Models<'_>, x: &Tensor, init: Tensor, cfg: &EncodeConfig) -> Result<EncodeResult> {
    let mut code = init;
    let mut state = OptimizerState::new();
    let mut best: Option<(f64, Evaluation, Tensor)> = None;
    let mut trajectory = Vec::new();
    let mut prev = f64::INFINITY;
    let mut stalled = 0usize;
    let mut steps_used = 0usize;
    loop {
        let may_step = steps_used < cfg.optimizer.max_steps && stalled < cfg.patience;
        let mut eval = evaluate(models, x, &code, cfg.space, cfg, may_step)?;
        let loss = total(cfg, &eval);
        if !loss.is_finite() {
            return Err(CoreError::NonFinite("encoding loss is not finite".into()));
        }
        if cfg.record_trajectory {
            trajectory.push(loss);
        }
        if prev - loss < cfg.optimizer.tolerance {
            stalled += 1;
        } else {
            stalled = 0;
        }
        prev = loss;
        let grad = eval.grad.take();
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, eval, code.clone()));
        }
        if !may_step {
            break;
        }
        let grad = grad.expect("gradient requested");
        step(std::slice::from_mut(&mut code), &[grad], &cfg.optimizer, &mut state)?;
        steps_used += 1;
    }
    let (_, eval, code) = best.expect("at least one evaluation");
    Ok(EncodeResult {
        code: LatentCode::new(cfg.space, code.into_data())?,
        final_loss: total(cfg, &eval),
        perceptual_term: eval.perceptual,
        realism_term: eval.realism,
        steps_used,
        trajectory: cfg.record_trajectory.then_some(trajectory),
    })
}

/// Random restarts start from the best of this many draws.
pub const RANDOM_INIT_CANDIDATES: usize = 16;

/// Initial code for `restart` (0-based). Later restarts always start from a
/// random draw.
fn initial_code(
    models: Models<'_>,
    x: &Image,
    cfg: &EncodeConfig,
    restart: usize,
    encoder: Option<&FeedforwardEncoder>,
) -> Result<LatentCode> {
    let g = models.generator;
    let init = if restart == 0 { cfg.init } else { EncodeInit::Random };
    let code = match init {
        EncodeInit::WMean => match cfg.space {
            LatentSpace::W => g.w_mean_code(),
            LatentSpace::Z => LatentCode::new(LatentSpace::Z, vec![0.0; g.config.latent_dim])?,
        },
        EncodeInit::Random => {
            // Best of a few random draws by objective value.
            let mut rng = substream(cfg.seed, &format!("encode-restart-{restart}"));
            let xt = x.to_tensor();
            let mut best: Option<(f64, LatentCode)> = None;
            for _ in 0..RANDOM_INIT_CANDIDATES {
                let z = sample_z(&mut rng, g.config.latent_dim);
                let code = match cfg.space {
                    LatentSpace::W => g.map_latent(&z)?,
                    LatentSpace::Z => z,
                };
                let loss = total(cfg, &evaluate(models, &xt, &code.to_tensor(), cfg.space, cfg, false)?);
                if loss.is_finite() && best.as_ref().is_none_or(|(b, _)| loss < *b) {
                    best = Some((loss, code));
                }
            }
            best.ok_or_else(|| CoreError::NonFinite("every random initial code diverged".into()))?.1
        }
        EncodeInit::EncoderWarmStart => {
            let e = encoder.ok_or_else(|| {
                CoreError::InvalidArgument("encoder_warm_start requires a trained feedforward encoder".into())
            })?;
            e.encode_fast(x)?
        }
    };
    if code.space != cfg.space {
        return Err(CoreError::InvalidCode(format!(
            "initial code is in {:?} space, encoding in {:?}",
            code.space, cfg.space
        )));
    }
    Ok(code)
}

/// Finds a latent code whose image matches `x`, minimizing
/// `perceptual(x, G(code)) + beta * softplus(-D(G(code)))`; returns the
/// best result over all restarts.
pub fn encode_optimize(
    x: &Image,
    models: Models<'_>,
    cfg: &EncodeConfig,
    encoder: Option<&FeedforwardEncoder>,
) -> Result<EncodeResult> {
    cfg.validate()?;
    if x.size() != models.generator.config.image_size {
        return Err(CoreError::InvalidImage(format!(
            "expected {0}x{0} image, got {1}x{1}",
            models.generator.config.image_size,
            x.size()
        )));
    }
    let xt = x.to_tensor();
    let mut best: Option<EncodeResult> = None;
    let mut last_err = None;
    for r in 0..cfg.restarts {
        let init = initial_code(models, x, cfg, r, encoder)?;
        match run_once(models, &xt, init.to_tensor(), cfg) {
            Ok(res) => {
                tracing::debug!(restart = r, loss = res.final_loss, steps = res.steps_used, "encode restart");
                if best.as_ref().is_none_or(|b| res.final_loss < b.final_loss) {
                    best = Some(res);
                }
            }
            Err(e @ (CoreError::NonFinite(_) | CoreError::Autodiff(AutodiffError::NonFinite { .. }))) => {
                tracing::warn!(restart = r, error = %e, "encode restart diverged");
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| {
        CoreError::NonFinite(format!(
            "every encoding restart diverged ({})",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        ))
    })
}

/// The encoding objective at `code` as a zero-step [`EncodeResult`].
pub fn encode_objective(x: &Image, code: &LatentCode, models: Models<'_>, cfg: &EncodeConfig) -> Result<EncodeResult> {
    cfg.validate()?;
    if code.space != cfg.space || code.dim() != models.code_dim(cfg.space) {
        return Err(CoreError::InvalidCode(format!("expected a {:?}-space code of dimension {}", cfg.space, models.code_dim(cfg.space))));
    }
    let eval = evaluate(models, &x.to_tensor(), &code.to_tensor(), cfg.space, cfg, false)?;
    Ok(EncodeResult {
        code: code.clone(),
        final_loss: total(cfg, &eval),
        perceptual_term: eval.perceptual,
        realism_term: eval.realism,
        steps_used: 0,
        trajectory: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Targets are the codes the images were sampled from.
    Synthetic,
    /// Targets come from running [`encode_optimize`] on each sample.
    Optimized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderTrainConfig {
    pub seed: u64,
    pub mode: PairMode,
    pub n_pairs: usize,
    pub channels: [usize; 4],
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f32,
    /// Maximum validation relative code error.
    pub max_relative_error: f64,
    /// Used to label pairs in optimized mode.
    pub encode: EncodeConfig,
    pub space: LatentSpace,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            seed: 0,
            mode: PairMode::Synthetic,
            n_pairs: 4000,
            channels: [16, 32, 64, 64],
            hidden: 128,
            steps: 3000,
            batch_size: 32,
            learning_rate: 0.002,
            holdout_fraction: 0.1,
            max_relative_error: 0.2,
            encode: EncodeConfig {
                restarts: 1,
                optimizer: OptimizerConfig {
                    tolerance: 1e-6,
                    ..OptimizerConfig::adam(0.05, 100)
                },
                ..EncodeConfig::default()
            },
            space: LatentSpace::W,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub validation_mse: f64,
    /// Squared error relative to the spread of the targets around their mean.
    pub validation_relative_error: f64,
    pub n_train: usize,
    pub n_validation: usize,
}

#[derive(Clone, Debug)]
pub struct FeedforwardEncoder {
    pub image_size: usize,
    pub space: LatentSpace,
    pub dim: usize,
    pub channels: [usize; 4],
    pub hidden: usize,
    pub params: ParamStore,
    convs: Vec<Conv>,
    fc: Dense,
    out: Dense,
}

impl FeedforwardEncoder {
    pub fn new(image_size: usize, space: LatentSpace, dim: usize, channels: [usize; 4], hidden: usize, seed: u64) -> Result<Self> {
        if image_size < 16 || !image_size.is_power_of_two() {
            return Err(CoreError::InvalidConfig(format!("image size {image_size} unsupported")));
        }
        let mut rng = substream(seed, "feedforward-encoder");
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &ch) in channels.iter().enumerate() {
            convs.push(Conv::new(&mut params, &mut rng, &format!("conv.{i}"), in_ch, ch, 3, 2, lrelu_gain()));
            in_ch = ch;
        }
        let side = image_size >> channels.len();
        let fc = Dense::new(&mut params, &mut rng, "fc", in_ch * side * side, hidden, lrelu_gain());
        let out = Dense::new(&mut params, &mut rng, "out", hidden, dim, 1.0);
        Ok(FeedforwardEncoder {
            image_size,
            space,
            dim,
            channels,
            hidden,
            params,
            convs,
            fc,
            out,
        })
    }

    fn forward(&self, tape: &mut Tape, p: &reform_autodiff::Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(tape, p, h)?;
            h = tape.leaky_relu(h)?;
        }
        let h = tape.flatten(h)?;
        let h = self.fc.forward(tape, p, h)?;
        let h = tape.leaky_relu(h)?;
        self.out.forward(tape, p, h)
    }

    pub fn encode_batch(&self, imgs: &[Image]) -> Result<Tensor> {
        for im in imgs {
            if im.size() != self.image_size {
                return Err(CoreError::InvalidImage(format!(
                    "expected {0}x{0} image, got {1}x{1}",
                    self.image_size,
                    im.size()
                )));
            }
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(Image::batch(imgs)?)?;
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }

    /// Single forward pass.
    pub fn encode_fast(&self, img: &Image) -> Result<LatentCode> {
        let t = self.encode_batch(std::slice::from_ref(img))?;
        LatentCode::new(self.space, t.into_data())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "encoder",
            "image_size": self.image_size,
            "space": self.space,
            "dim": self.dim,
            "channels": self.channels,
            "hidden": self.hidden,
        }));
        c.extend_from_store("", &self.params);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        expect_kind(c, "encoder")?;
        let m = &c.metadata;
        let field = |k: &str| m[k].as_u64().map(|v| v as usize).ok_or_else(|| CoreError::Checkpoint(format!("missing '{k}'")));
        let mut e = FeedforwardEncoder::new(
            field("image_size")?,
            serde_json::from_value(m["space"].clone())?,
            field("dim")?,
            serde_json::from_value(m["channels"].clone())?,
            field("hidden")?,
            0,
        )?;
        c.load_into("", &mut e.params)?;
        Ok(e)
    }
}

fn code_rows(t: &Tensor) -> Vec<Vec<f32>> {
    let dim = t.shape()[1];
    t.data().chunks(dim).map(<[f32]>::to_vec).collect()
}

/// `(mse, relative error)` of predicted codes against targets.
pub fn code_errors(pred: &[Vec<f32>], target: &[Vec<f32>]) -> (f64, f64) {
    let dim = target[0].len();
    let n = target.len() as f64;
    let mut mean = vec![0.0f64; dim];
    for t in target {
        for (m, &v) in mean.iter_mut().zip(t) {
            *m += v as f64 / n;
        }
    }
    let (mut err, mut spread) = (0.0f64, 0.0f64);
    for (p, t) in pred.iter().zip(target) {
        for j in 0..dim {
            err += (p[j] as f64 - t[j] as f64).powi(2);
            spread += (t[j] as f64 - mean[j]).powi(2);
        }
    }
    (err / (n * dim as f64), if spread > 0.0 { err / spread } else { f64::INFINITY })
}

/// Trains a conv regressor from generated images to latent codes.
pub fn train_feedforward_encoder(
    models: Models<'_>,
    cfg: &EncoderTrainConfig,
) -> Result<(FeedforwardEncoder, EncoderReport)> {
    if cfg.n_pairs < 500 {
        return Err(CoreError::InvalidArgument(format!("need at least 500 pairs, got {}", cfg.n_pairs)));
    }
    let g = models.generator;
    let dim = models.code_dim(cfg.space);
    let mut rng = substream(cfg.seed, "encoder-pairs");
    let mut images = Vec::with_capacity(cfg.n_pairs);
    let mut codes = Vec::with_capacity(cfg.n_pairs);
    for start in (0..cfg.n_pairs).step_by(100) {
        let m = (cfg.n_pairs - start).min(100);
        let z = normal_tensor::<f32>(&mut rng, [m, g.config.latent_dim], 1.0);
        let w = g.map_batch(&z)?;
        let imgs = g.synthesize_batch(&w)?;
        let src = match cfg.space {
            LatentSpace::W => w,
            LatentSpace::Z => z,
        };
        for (img, code) in imgs.into_iter().zip(code_rows(&src)) {
            let code = match cfg.mode {
                PairMode::Synthetic => code,
                PairMode::Optimized => {
                    let ecfg = EncodeConfig { space: cfg.space, ..cfg.encode.clone() };
                    encode_optimize(&img, models, &ecfg, None)?.code.values
                }
            };
            images.push(img);
            codes.push(code);
        }
    }
    let n_val = ((cfg.n_pairs as f32 * cfg.holdout_fraction).round() as usize).clamp(1, cfg.n_pairs - 1);
    let n_train = cfg.n_pairs - n_val;
    let mut enc = FeedforwardEncoder::new(g.config.image_size, cfg.space, dim, cfg.channels, cfg.hidden, cfg.seed)?;
    let opt = OptimizerConfig::adam(cfg.learning_rate, cfg.steps);
    let mut state = OptimizerState::new();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut cursor = n_train;
    for it in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(n_train) {
            if cursor == n_train {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let imgs: Vec<Image> = batch.iter().map(|&i| images[i].clone()).collect();
        let target: Vec<f32> = batch.iter().flat_map(|&i| codes[i].iter().copied()).collect();
        let mut tape = Tape::new();
        let p = enc.params.bind(&mut tape, true)?;
        let x = tape.constant(Image::batch(&imgs)?)?;
        let y = enc.forward(&mut tape, &p, x)?;
        let t = tape.constant(Tensor::new([batch.len(), dim], target)?)?;
        let loss = tape.mse(y, t)?;
        let grads = tape.backward(loss)?;
        step(enc.params.tensors_mut(), &p.grads(&grads), &opt, &mut state)?;
        if it % 500 == 0 {
            tracing::debug!(step = it, loss = tape.value(loss).data()[0], "encoder step");
        }
    }
    let mut pred = Vec::with_capacity(n_val);
    for chunk in images[n_train..].chunks(100) {
        pred.extend(code_rows(&enc.encode_batch(chunk)?));
    }
    let (mse, rel) = code_errors(&pred, &codes[n_train..]);
    let report = EncoderReport {
        validation_mse: mse,
        validation_relative_error: rel,
        n_train,
        n_validation: n_val,
    };
    if !(rel <= cfg.max_relative_error) {
        return Err(CoreError::Training(format!(
            "feedforward encoder validation relative error {rel:.4} above ceiling {}",
            cfg.max_relative_error
        )));
    }
    tracing::info!(?report, "feedforward encoder trained");
    Ok((enc, report))
}
