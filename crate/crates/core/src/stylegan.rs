//! Toy style-based generator and convolutional discriminator.
//!
//! The generator maps `z` through a small dense network to `w`, then runs a
//! learned 4x4 constant through upsample + conv blocks, each followed by
//! instance normalization and a per-channel affine modulation computed from
//! `w`. There is no noise input.

use rand_distr::{Distribution, StandardNormal};
use reform_autodiff::rng::{substream, Rng};
use reform_autodiff::{Bound, Element, ParamId, ParamStore, Tape, Tensor, TensorOf, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::nn::{broadcast_batch, lrelu_gain, Conv, Dense};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LatentSpace {
    Z,
    W,
}

/// A `1 x N` latent vector tagged with the space it lives in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub space: LatentSpace,
    pub values: Vec<f32>,
}

impl LatentCode {
    pub fn new(space: LatentSpace, values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(CoreError::InvalidCode("latent code is empty".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::InvalidCode("latent code has non-finite values".into()));
        }
        Ok(LatentCode { space, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.values.len()], self.values.clone()).expect("length matches")
    }

    fn expect(&self, space: LatentSpace, dim: usize) -> Result<()> {
        if self.space != space {
            return Err(CoreError::InvalidCode(format!(
                "expected a {space:?}-space code, got {:?}",
                self.space
            )));
        }
        if self.values.len() != dim {
            return Err(CoreError::InvalidCode(format!(
                "expected dimension {dim}, got {}",
                self.values.len()
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::InvalidCode("latent code has non-finite values".into()));
        }
        Ok(())
    }
}

/// `n` samples from `N(0, I)` in `dim` dimensions.
pub fn sample_z(rng: &mut Rng, dim: usize) -> LatentCode {
    let values = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    LatentCode {
        space: LatentSpace::Z,
        values,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub w_dim: usize,
    pub image_size: usize,
    /// Feature channels per resolution, starting at 4x4.
    pub channels: Vec<usize>,
    pub mapping_layers: usize,
    /// Init gain of the last mapping layer; keeps `w` at a moderate scale.
    pub w_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            latent_dim: 64,
            w_dim: 64,
            image_size: 32,
            channels: vec![32, 32, 16, 8],
            mapping_layers: 3,
            w_gain: 0.3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = resolution_levels(self.image_size)?;
        if self.channels.len() != levels {
            return Err(CoreError::InvalidConfig(format!(
                "image size {} needs {levels} channel entries, got {}",
                self.image_size,
                self.channels.len()
            )));
        }
        if self.latent_dim == 0 || self.w_dim == 0 || self.mapping_layers == 0 || self.channels.contains(&0) {
            return Err(CoreError::InvalidConfig("generator dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn resolution_levels(size: usize) -> Result<usize> {
    if size < 8 || !size.is_power_of_two() {
        return Err(CoreError::InvalidConfig(format!("image size {size} must be a power of two >= 8")));
    }
    Ok(size.trailing_zeros() as usize - 1)
}

#[derive(Clone, Debug)]
struct SynthBlock {
    upsample: bool,
    conv: Conv,
    style_scale: Dense,
    style_bias: Dense,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    mapping: Vec<Dense>,
    constant: ParamId,
    blocks: Vec<SynthBlock>,
    to_rgb: Conv,
    /// Running mean of mapped `w`; only training updates it.
    pub w_mean: Vec<f32>,
    /// Applied by [`Generator::sample`] only.
    pub truncation_psi: f32,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "generator");
        let mut params = ParamStore::new();
        let mut mapping = Vec::with_capacity(config.mapping_layers);
        for i in 0..config.mapping_layers {
            let fan_in = if i == 0 { config.latent_dim } else { config.w_dim };
            let last = i + 1 == config.mapping_layers;
            let gain = if last { config.w_gain } else { lrelu_gain() };
            mapping.push(Dense::new(&mut params, &mut rng, &format!("mapping.{i}"), fan_in, config.w_dim, gain));
        }
        let c0 = config.channels[0];
        let constant = params.add(
            "const",
            reform_autodiff::rng::normal_tensor(&mut rng, [1, c0, 4, 4], 1.0),
        );
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut in_ch = c0;
        for (i, &ch) in config.channels.iter().enumerate() {
            let name = format!("block.{i}");
            let conv = Conv::new(&mut params, &mut rng, &format!("{name}.conv"), in_ch, ch, 3, 1, lrelu_gain());
            // Small init keeps modulation near identity at the start.
            let style_scale = Dense::new(&mut params, &mut rng, &format!("{name}.style_scale"), config.w_dim, ch, 0.25);
            let style_bias = Dense::new(&mut params, &mut rng, &format!("{name}.style_bias"), config.w_dim, ch, 0.25);
            blocks.push(SynthBlock {
                upsample: i > 0,
                conv,
                style_scale,
                style_bias,
            });
            in_ch = ch;
        }
        let to_rgb = Conv::new(&mut params, &mut rng, "to_rgb", in_ch, 3, 1, 1, 1.0);
        let w_mean = vec![0.0; config.w_dim];
        Ok(Generator {
            config,
            params,
            mapping,
            constant,
            blocks,
            to_rgb,
            w_mean,
            truncation_psi: 1.0,
        })
    }

    /// Indices of the mapping network's tensors in `params`.
    pub fn mapping_param_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for d in &self.mapping {
            mask[d.weight.index()] = true;
            mask[d.bias.index()] = true;
        }
        mask
    }

    /// Zeroes the last mapping layer so every `z` maps to `w = 0`.
    pub fn zero_final_mapping(&mut self) {
        let last = *self.mapping.last().expect("at least one mapping layer");
        for id in [last.weight, last.bias] {
            let t = self.params.get_mut(id);
            *t = TensorOf::zeros(t.shape().to_vec());
        }
    }

    /// `z [N, latent] -> w [N, w_dim]` on a tape.
    pub fn map_var<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let mut h = z;
        for (i, d) in self.mapping.iter().enumerate() {
            h = d.forward(tape, p, h)?;
            if i + 1 < self.mapping.len() {
                h = tape.leaky_relu(h)?;
            }
        }
        Ok(h)
    }

    /// `w [N, w_dim] -> images [N, 3, S, S]` on a tape.
    pub fn synthesize_var<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, w: Var) -> Result<Var> {
        let n = tape.shape(w)[0];
        let mut h = broadcast_batch(tape, p[self.constant], n)?;
        for b in &self.blocks {
            if b.upsample {
                h = tape.upsample2x(h)?;
            }
            h = b.conv.forward(tape, p, h)?;
            h = tape.leaky_relu(h)?;
            h = tape.instance_norm(h)?;
            let s = b.style_scale.forward(tape, p, w)?;
            let s = tape.add_scalar(s, 1.0)?;
            let t = b.style_bias.forward(tape, p, w)?;
            h = tape.modulate(h, s, t)?;
        }
        let rgb = self.to_rgb.forward(tape, p, h)?;
        Ok(tape.tanh(rgb)?)
    }

    pub fn map_latent(&self, z: &LatentCode) -> Result<LatentCode> {
        z.expect(LatentSpace::Z, self.config.latent_dim)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let zv = tape.constant(z.to_tensor())?;
        let w = self.map_var(&mut tape, &p, zv)?;
        LatentCode::new(LatentSpace::W, tape.value(w).data().to_vec())
    }

    /// Maps a batch of `z` rows; returns `[N, w_dim]`.
    pub fn map_batch(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let zv = tape.constant(z.clone())?;
        let w = self.map_var(&mut tape, &p, zv)?;
        Ok(tape.value(w).clone())
    }

    /// `w_mean + psi * (w - w_mean)`.
    pub fn truncate(&self, w: &LatentCode, psi: f32) -> Result<LatentCode> {
        if !(0.0..=1.0).contains(&psi) {
            return Err(CoreError::InvalidArgument(format!("truncation psi {psi} outside [0, 1]")));
        }
        w.expect(LatentSpace::W, self.config.w_dim)?;
        if psi == 1.0 {
            return Ok(w.clone());
        }
        let values = w
            .values
            .iter()
            .zip(&self.w_mean)
            .map(|(&v, &m)| m + psi * (v - m))
            .collect();
        LatentCode::new(LatentSpace::W, values)
    }

    pub fn synthesize(&self, w: &LatentCode) -> Result<Image> {
        w.expect(LatentSpace::W, self.config.w_dim)?;
        Ok(self.synthesize_batch(&w.to_tensor())?.remove(0))
    }

    pub fn synthesize_batch(&self, w: &Tensor) -> Result<Vec<Image>> {
        if !w.is_finite() {
            return Err(CoreError::InvalidCode("latent code has non-finite values".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let wv = tape.constant(w.clone())?;
        let x = self.synthesize_var(&mut tape, &p, wv)?;
        Image::unbatch(tape.value(x))
    }

    pub fn w_mean_code(&self) -> LatentCode {
        LatentCode {
            space: LatentSpace::W,
            values: self.w_mean.clone(),
        }
    }

    /// Draws `n` images at truncation `psi`.
    pub fn sample(&self, rng: &mut Rng, n: usize, psi: f32) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(50) {
            let m = (n - start).min(50);
            let z = Tensor::from_fn([m, self.config.latent_dim], |_| StandardNormal.sample(rng));
            let w = self.map_batch(&z)?;
            let wd = self.config.w_dim;
            let mut t = w.into_data();
            for row in t.chunks_mut(wd).filter(|_| psi != 1.0) {
                for (v, &mu) in row.iter_mut().zip(&self.w_mean) {
                    *v = mu + psi * (*v - mu);
                }
            }
            out.extend(self.synthesize_batch(&Tensor::new([m, wd], t)?)?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "generator",
            "config": self.config,
            "truncation_psi": self.truncation_psi,
        }));
        c.extend_from_store("", &self.params);
        c.push("w_mean", Tensor::new([self.w_mean.len()], self.w_mean.clone())?);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        expect_kind(c, "generator")?;
        let config: GeneratorConfig = serde_json::from_value(c.metadata["config"].clone())?;
        let mut g = Generator::new(config, 0)?;
        c.load_into("", &mut g.params)?;
        g.w_mean = c.get("w_mean")?.data().to_vec();
        g.truncation_psi = c.metadata["truncation_psi"].as_f64().unwrap_or(1.0) as f32;
        Ok(g)
    }
}

pub(crate) fn expect_kind(c: &Checkpoint, kind: &str) -> Result<()> {
    match c.metadata["kind"].as_str() {
        Some(k) if k == kind => Ok(()),
        other => Err(CoreError::Checkpoint(format!("expected a {kind} checkpoint, found {other:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    /// Channels of each stride-2 conv, ending at 4x4.
    pub channels: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            image_size: 32,
            channels: vec![16, 32, 64],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    convs: Vec<Conv>,
    head: Dense,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let levels = resolution_levels(config.image_size)?;
        if config.channels.len() != levels - 1 {
            return Err(CoreError::InvalidConfig(format!(
                "image size {} needs {} discriminator convs, got {}",
                config.image_size,
                levels - 1,
                config.channels.len()
            )));
        }
        let mut rng = substream(seed, "discriminator");
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for (i, &ch) in config.channels.iter().enumerate() {
            convs.push(Conv::new(&mut params, &mut rng, &format!("conv.{i}"), in_ch, ch, 3, 2, lrelu_gain()));
            in_ch = ch;
        }
        let head = Dense::new(&mut params, &mut rng, "head", in_ch * 16, 1, 1.0);
        Ok(Discriminator {
            config,
            params,
            convs,
            head,
        })
    }

    /// `images [N, 3, S, S] -> logits [N, 1]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(tape, p, h)?;
            h = tape.leaky_relu(h)?;
        }
        let h = tape.flatten(h)?;
        self.head.forward(tape, p, h)
    }

    pub fn logits(&self, images: &[Image]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(Image::batch(images)?)?;
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "discriminator",
            "config": self.config,
        }));
        c.extend_from_store("", &self.params);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        expect_kind(c, "discriminator")?;
        let config: DiscriminatorConfig = serde_json::from_value(c.metadata["config"].clone())?;
        let mut d = Discriminator::new(config, 0)?;
        c.load_into("", &mut d.params)?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use reform_autodiff::rng::seeded;

    fn gen() -> Generator {
        Generator::new(GeneratorConfig::default(), 1).unwrap()
    }

    #[test]
    fn mapping_is_deterministic() {
        let g = gen();
        let z = sample_z(&mut seeded(0), 64);
        assert_eq!(g.map_latent(&z).unwrap(), g.map_latent(&z).unwrap());
    }

    #[test]
    fn zero_final_layer_maps_to_origin() {
        let mut g = gen();
        g.zero_final_mapping();
        let mut rng = seeded(4);
        for _ in 0..5 {
            let w = g.map_latent(&sample_z(&mut rng, 64)).unwrap();
            assert!(w.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn wrong_space_or_dim_rejected() {
        let g = gen();
        let w = LatentCode::new(LatentSpace::W, vec![0.0; 64]).unwrap();
        assert!(g.map_latent(&w).is_err());
        let z = LatentCode::new(LatentSpace::Z, vec![0.0; 10]).unwrap();
        assert!(g.map_latent(&z).is_err());
        assert!(g.synthesize(&z).is_err());
    }

    #[test]
    fn truncation_identities() {
        let mut g = gen();
        g.w_mean = (0..64).map(|i| i as f32 * 0.01).collect();
        let w = g.map_latent(&sample_z(&mut seeded(2), 64)).unwrap();
        assert_eq!(g.truncate(&w, 1.0).unwrap(), w);
        assert_eq!(g.truncate(&w, 0.0).unwrap().values, g.w_mean);
        let half = g.truncate(&w, 0.5).unwrap();
        for ((h, v), m) in half.values.iter().zip(&w.values).zip(&g.w_mean) {
            assert!((h - (m + (v - m) / 2.0)).abs() < 1e-6);
        }
        assert!(g.truncate(&w, 1.5).is_err());
        assert!(g.truncate(&w, -0.1).is_err());
    }

    #[test]
    fn synthesis_shape_range_and_determinism() {
        let g = gen();
        let w = g.map_latent(&sample_z(&mut seeded(3), 64)).unwrap();
        let a = g.synthesize(&w).unwrap();
        let b = g.synthesize(&w).unwrap();
        assert_eq!(a.size(), 32);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let w0 = g.truncate(&w, 0.0).unwrap();
        let w1 = g.truncate(&g.map_latent(&sample_z(&mut seeded(9), 64)).unwrap(), 0.0).unwrap();
        assert_eq!(g.synthesize(&w0).unwrap(), g.synthesize(&w1).unwrap());
    }

    #[test]
    fn non_finite_code_rejected() {
        let g = gen();
        let bad = LatentCode { space: LatentSpace::W, values: vec![f32::NAN; 64] };
        assert!(g.synthesize(&bad).is_err());
    }

    #[test]
    fn size_64_has_extra_block() {
        let cfg = GeneratorConfig { image_size: 64, channels: vec![32, 32, 16, 8, 8], ..Default::default() };
        let g = Generator::new(cfg, 0).unwrap();
        let img = g.synthesize(&g.w_mean_code()).unwrap();
        assert_eq!(img.size(), 64);
        let bad = GeneratorConfig { image_size: 64, ..Default::default() };
        assert!(Generator::new(bad, 0).is_err());
    }

    #[test]
    fn discriminator_scalar_per_image() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 0).unwrap();
        let imgs = vec![Image::filled(32, [0.0; 3]); 3];
        assert_eq!(d.logits(&imgs).unwrap().len(), 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut g = gen();
        g.w_mean[3] = 0.25;
        let c = g.to_checkpoint().unwrap();
        let back = Generator::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), c.to_bytes().unwrap());
        let d = Discriminator::new(DiscriminatorConfig::default(), 5).unwrap();
        assert!(Generator::from_checkpoint(&d.to_checkpoint().unwrap()).is_err());
    }
}
