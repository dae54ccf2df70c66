//! Small attribute-supervised conv net whose intermediate activations serve
//! as perceptual features.

use rand::seq::SliceRandom;
use reform_autodiff::optim::step;
use reform_autodiff::rng::substream;
use reform_autodiff::{Bound, Element, OptimizerConfig, OptimizerState, ParamStore, Tape, Tensor, TensorOf, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::LabeledImage;
use crate::error::{CoreError, Result};
use crate::garment::{GarmentParams, LENGTH_RANGE};
use crate::image::Image;
use crate::nn::{lrelu_gain, Conv, Dense};
use crate::stylegan::expect_kind;

pub const HUE_BINS: usize = 6;
pub const NUM_LAYERS: usize = 4;

/// Hue bin with bin 0 centred on red.
pub fn hue_bin(hue: f32) -> usize {
    (((hue + 0.5 / HUE_BINS as f32) * HUE_BINS as f32).floor() as usize) % HUE_BINS
}

fn length_unit(length: f32) -> f32 {
    ((length - LENGTH_RANGE.0) / (LENGTH_RANGE.1 - LENGTH_RANGE.0)).clamp(0.0, 1.0)
}

fn head_targets(p: &GarmentParams) -> [f32; HUE_BINS + 2] {
    let mut t = [0.0; HUE_BINS + 2];
    t[hue_bin(p.hue)] = 1.0;
    t[HUE_BINS] = length_unit(p.length);
    t[HUE_BINS + 1] = p.pattern.stripedness();
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptualConfig {
    pub seed: u64,
    pub image_size: usize,
    /// Channels of L1..L4.
    pub channels: [usize; NUM_LAYERS],
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f32,
    pub min_accuracy: f32,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            seed: 0,
            image_size: 32,
            channels: [8, 16, 32, 32],
            steps: 2000,
            batch_size: 32,
            learning_rate: 0.003,
            holdout_fraction: 0.2,
            min_accuracy: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualReport {
    pub hue_bin_accuracy: f32,
    /// Fraction of held-out lengths predicted within 0.1.
    pub length_accuracy: f32,
    pub length_mae: f32,
    pub stripe_accuracy: f32,
    pub final_train_loss: f32,
    pub holdout_size: usize,
}

#[derive(Clone, Debug)]
pub struct PerceptualModel {
    pub config: PerceptualConfig,
    pub params: ParamStore,
    layers: Vec<Conv>,
    head: Dense,
}

/// Layer indices are 1-based, `1..=4`.
pub fn validate_layers(layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(CoreError::InvalidArgument("perceptual layer set is empty".into()));
    }
    for &l in layers {
        if !(1..=NUM_LAYERS).contains(&l) {
            return Err(CoreError::InvalidArgument(format!("perceptual layer {l} outside 1..={NUM_LAYERS}")));
        }
    }
    Ok(())
}

impl PerceptualModel {
    pub fn new(config: PerceptualConfig) -> Result<Self> {
        let s = config.image_size;
        if s < 16 || !s.is_power_of_two() {
            return Err(CoreError::InvalidConfig(format!("image size {s} unsupported")));
        }
        let mut rng = substream(config.seed, "perceptual");
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        let mut in_ch = 3;
        for (i, &ch) in config.channels.iter().enumerate() {
            layers.push(Conv::new(&mut params, &mut rng, &format!("L{}", i + 1), in_ch, ch, 3, 2, lrelu_gain()));
            in_ch = ch;
        }
        let final_side = s >> NUM_LAYERS;
        let head = Dense::new(&mut params, &mut rng, "head", in_ch * final_side * final_side, HUE_BINS + 2, 1.0);
        Ok(PerceptualModel {
            config,
            params,
            layers,
            head,
        })
    }

    /// Activations of L1..=`upto` for a batch `x [N, 3, S, S]`.
    pub fn features_var<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, upto: usize) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(upto);
        let mut h = x;
        for conv in &self.layers[..upto] {
            h = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(h)?;
            out.push(h);
        }
        Ok(out)
    }

    fn head_var<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let feats = self.features_var(tape, p, x, NUM_LAYERS)?;
        let flat = tape.flatten(feats[NUM_LAYERS - 1])?;
        self.head.forward(tape, p, flat)
    }

    /// Sum over `layers` of the mean squared difference between the features
    /// of `xhat` and precomputed `target` features (indexed by layer - 1).
    pub fn loss_against<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        target: &[Var],
        xhat: Var,
        layers: &[usize],
    ) -> Result<Var> {
        validate_layers(layers)?;
        let upto = *layers.iter().max().expect("non-empty");
        let feats = self.features_var(tape, p, xhat, upto)?;
        let mut total: Option<Var> = None;
        for &l in layers {
            let term = tape.mse(feats[l - 1], target[l - 1])?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("non-empty"))
    }

    pub fn features(&self, img: &Image, layer: usize) -> Result<Tensor> {
        validate_layers(&[layer])?;
        self.check_size(img)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(img.to_tensor())?;
        let feats = self.features_var(&mut tape, &p, x, layer)?;
        Ok(tape.value(feats[layer - 1]).clone())
    }

    pub fn perceptual_loss(&self, x: &Image, xhat: &Image, layers: &[usize]) -> Result<f32> {
        validate_layers(layers)?;
        if x.size() != xhat.size() {
            return Err(CoreError::InvalidArgument(format!(
                "image sizes differ: {} vs {}",
                x.size(),
                xhat.size()
            )));
        }
        self.check_size(x)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let upto = *layers.iter().max().expect("non-empty");
        let xv = tape.constant(x.to_tensor())?;
        let target = self.features_var(&mut tape, &p, xv, upto)?;
        let yv = tape.constant(xhat.to_tensor())?;
        let loss = self.loss_against(&mut tape, &p, &target, yv, layers)?;
        Ok(tape.value(loss).data()[0])
    }

    /// L2-normalized L4 activations.
    pub fn embed(&self, img: &Image) -> Result<Vec<f32>> {
        Ok(self.embed_batch(std::slice::from_ref(img))?.remove(0))
    }

    pub fn embed_batch(&self, imgs: &[Image]) -> Result<Vec<Vec<f32>>> {
        for im in imgs {
            self.check_size(im)?;
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(Image::batch(imgs)?)?;
        let feats = self.features_var(&mut tape, &p, x, NUM_LAYERS)?;
        let t = tape.value(feats[NUM_LAYERS - 1]);
        let per = t.numel() / imgs.len();
        Ok(t.data()
            .chunks(per)
            .map(|c| {
                let norm = c.iter().map(|v| v * v).sum::<f32>().sqrt();
                if norm > 0.0 {
                    c.iter().map(|v| v / norm).collect()
                } else {
                    c.to_vec()
                }
            })
            .collect())
    }

    /// `(hue bin, length, stripedness)` predictions from the head.
    pub fn predict(&self, imgs: &[Image]) -> Result<Vec<(usize, f32, f32)>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(Image::batch(imgs)?)?;
        let y = self.head_var(&mut tape, &p, x)?;
        let k = HUE_BINS + 2;
        Ok(tape
            .value(y)
            .data()
            .chunks(k)
            .map(|r| {
                let bin = (0..HUE_BINS).max_by(|&a, &b| r[a].total_cmp(&r[b])).expect("bins");
                let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
                let length = LENGTH_RANGE.0 + sig(r[HUE_BINS]) * (LENGTH_RANGE.1 - LENGTH_RANGE.0);
                (bin, length, sig(r[HUE_BINS + 1]))
            })
            .collect())
    }

    fn check_size(&self, img: &Image) -> Result<()> {
        if img.size() != self.config.image_size {
            return Err(CoreError::InvalidImage(format!(
                "expected {0}x{0} image, got {1}x{1}",
                self.config.image_size,
                img.size()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(serde_json::json!({"kind": "perceptual", "config": self.config}));
        c.extend_from_store("", &self.params);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        expect_kind(c, "perceptual")?;
        let config: PerceptualConfig = serde_json::from_value(c.metadata["config"].clone())?;
        let mut m = PerceptualModel::new(config)?;
        c.load_into("", &mut m.params)?;
        Ok(m)
    }

    /// Same network evaluated in another precision.
    pub fn params_as<T: Element>(&self) -> ParamStore<T> {
        self.params.cast()
    }
}

/// Evaluates the head on `data`.
pub fn evaluate(model: &PerceptualModel, data: &[LabeledImage]) -> Result<PerceptualReport> {
    let mut hue_ok = 0;
    let mut len_ok = 0;
    let mut stripe_ok = 0;
    let mut mae = 0.0f32;
    for chunk in data.chunks(64) {
        let imgs: Vec<Image> = chunk.iter().map(|l| l.image.clone()).collect();
        for (l, (bin, length, stripe)) in chunk.iter().zip(model.predict(&imgs)?) {
            hue_ok += usize::from(bin == hue_bin(l.params.hue));
            let err = (length - l.params.length).abs();
            mae += err;
            len_ok += usize::from(err <= 0.1);
            stripe_ok += usize::from((stripe > 0.5) == (l.params.pattern.stripedness() > 0.5));
        }
    }
    let n = data.len().max(1) as f32;
    Ok(PerceptualReport {
        hue_bin_accuracy: hue_ok as f32 / n,
        length_accuracy: len_ok as f32 / n,
        length_mae: mae / n,
        stripe_accuracy: stripe_ok as f32 / n,
        final_train_loss: f32::NAN,
        holdout_size: data.len(),
    })
}

/// Trains on `data` (optionally with labels shuffled across images) and
/// reports held-out accuracy without enforcing a threshold.
pub fn fit_perceptual(
    data: &[LabeledImage],
    config: &PerceptualConfig,
    shuffle_labels: bool,
) -> Result<(PerceptualModel, PerceptualReport)> {
    if data.len() < 10 {
        return Err(CoreError::InvalidArgument("perceptual training needs at least 10 images".into()));
    }
    let mut model = PerceptualModel::new(config.clone())?;
    let mut rng = substream(config.seed, "perceptual-train");
    let n_hold = ((data.len() as f32 * config.holdout_fraction).round() as usize).clamp(1, data.len() - 1);
    let (train, hold) = data.split_at(data.len() - n_hold);
    let mut labels: Vec<[f32; HUE_BINS + 2]> = train.iter().map(|l| head_targets(&l.params)).collect();
    if shuffle_labels {
        labels.shuffle(&mut substream(config.seed, "perceptual-shuffle"));
    }
    let opt = OptimizerConfig::adam(config.learning_rate, config.steps);
    let mut state = OptimizerState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut last_loss = f32::NAN;
    for it in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let imgs: Vec<Image> = batch.iter().map(|&i| train[i].image.clone()).collect();
        let targets: Vec<f32> = batch.iter().flat_map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true)?;
        let x = tape.constant(Image::batch(&imgs)?)?;
        let logits = model.head_var(&mut tape, &p, x)?;
        let t = tape.constant(Tensor::new([batch.len(), HUE_BINS + 2], targets)?)?;
        let loss = tape.bce_with_logits(logits, t)?;
        let grads = tape.backward(loss)?;
        step(model.params.tensors_mut(), &p.grads(&grads), &opt, &mut state)?;
        last_loss = tape.value(loss).data()[0];
        if it % 250 == 0 {
            tracing::debug!(step = it, loss = last_loss, "perceptual step");
        }
    }
    let mut report = evaluate(&model, hold)?;
    report.final_train_loss = last_loss;
    Ok((model, report))
}

/// [`fit_perceptual`] that fails unless both hue-bin and length accuracy
/// reach the configured threshold.
pub fn train_perceptual(data: &[LabeledImage], config: &PerceptualConfig) -> Result<(PerceptualModel, PerceptualReport)> {
    let (model, report) = fit_perceptual(data, config, false)?;
    if report.hue_bin_accuracy < config.min_accuracy || report.length_accuracy < config.min_accuracy {
        return Err(CoreError::Training(format!(
            "perceptual net below {:.2} held-out accuracy: {}",
            config.min_accuracy,
            serde_json::to_string(&report)?
        )));
    }
    tracing::info!(?report, "perceptual net trained");
    Ok((model, report))
}

/// `sum over layers of mean squared feature difference` evaluated fully in `T`.
pub fn perceptual_loss_in<T: Element>(
    model: &PerceptualModel,
    params: &ParamStore<T>,
    x: &TensorOf<T>,
    xhat: &TensorOf<T>,
    layers: &[usize],
) -> Result<T> {
    validate_layers(layers)?;
    let mut tape = Tape::<T>::new();
    let p = params.bind(&mut tape, false)?;
    let upto = *layers.iter().max().expect("non-empty");
    let xv = tape.constant(x.clone())?;
    let target = model.features_var(&mut tape, &p, xv, upto)?;
    let yv = tape.constant(xhat.clone())?;
    let loss = model.loss_against(&mut tape, &p, &target, yv, layers)?;
    Ok(tape.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hue_bins_centered_on_red() {
        assert_eq!(hue_bin(0.0), 0);
        assert_eq!(hue_bin(0.95), 0);
        assert_eq!(hue_bin(1.0 / 6.0), 1);
        assert_eq!(hue_bin(0.5), 3);
        assert_eq!(hue_bin(0.999), 0);
    }

    #[test]
    fn invalid_layers_rejected() {
        let m = PerceptualModel::new(PerceptualConfig::default()).unwrap();
        let img = Image::filled(32, [0.0; 3]);
        assert!(m.features(&img, 0).is_err());
        assert!(m.features(&img, 5).is_err());
        assert!(m.perceptual_loss(&img, &img, &[]).is_err());
        assert!(m.perceptual_loss(&img, &Image::filled(64, [0.0; 3]), &[2]).is_err());
    }

    #[test]
    fn feature_shapes() {
        let m = PerceptualModel::new(PerceptualConfig::default()).unwrap();
        let img = Image::filled(32, [0.2; 3]);
        assert_eq!(m.features(&img, 1).unwrap().shape(), &[1, 8, 16, 16]);
        assert_eq!(m.features(&img, 4).unwrap().shape(), &[1, 32, 2, 2]);
        assert_eq!(m.embed(&img).unwrap().len(), 128);
    }
}
