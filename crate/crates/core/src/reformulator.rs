//! Latent attribute classifier and gradient-propagation editing.

use rand::seq::SliceRandom;
use reform_autodiff::optim::step;
use reform_autodiff::rng::{normal_tensor, substream};
use reform_autodiff::{OptimizerConfig, OptimizerState, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::catalog::Attribute;
use crate::checkpoint::Checkpoint;
use crate::dataset::LabeledImage;
use crate::encoder::FeedforwardEncoder;
use crate::error::{CoreError, Result};
use crate::garment::hue_distance;
use crate::oracle::extract_attributes;
use crate::stylegan::{expect_kind, Generator, LatentCode, LatentSpace};

/// Distance from 0 and 1 that set targets are clamped to.
pub const TARGET_MARGIN: f32 = 1e-3;
/// A set attribute counts as reached within this distance.
pub const CONVERGENCE_TOLERANCE: f32 = 0.05;
const OUTPUT_MARGIN: f64 = 1e-6;
/// Circular attributes live on two heads, `0.5 + R (cos, sin)` of the angle.
const CIRCLE_RADIUS: f32 = 0.45;

pub fn default_reform_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(0.02, 300)
}

/// Affine coordinates `code = mean + L u` with `L L^T` the (ridged)
/// covariance of the classifier's training codes.
///
/// Editing runs on `u`. A plain gradient step in code space is dominated by
/// directions the training codes barely vary along, which move the
/// classifier without moving the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Whitening {
    pub mean: Vec<f32>,
    /// Lower-triangular Cholesky factor, row-major `dim x dim`.
    pub chol: Vec<f32>,
}

/// Diagonal ridge relative to the mean code variance.
const WHITENING_RIDGE: f64 = 1e-3;

impl Whitening {
    pub fn fit(codes: &[Vec<f32>]) -> Result<Self> {
        let n = codes.len();
        let dim = codes.first().map_or(0, Vec::len);
        if n < 2 || dim == 0 {
            return Err(CoreError::InvalidArgument("whitening needs at least two codes".into()));
        }
        let x = nalgebra::DMatrix::from_fn(n, dim, |i, j| codes[i][j] as f64);
        let mean = x.row_mean();
        let centered = nalgebra::DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        let ridge = WHITENING_RIDGE * cov.trace() / dim as f64;
        for i in 0..dim {
            cov[(i, i)] += ridge;
        }
        let l = nalgebra::Cholesky::new(cov)
            .ok_or_else(|| CoreError::Training("code covariance is not positive definite".into()))?
            .l();
        Ok(Whitening {
            mean: mean.iter().map(|&v| v as f32).collect(),
            chol: (0..dim * dim).map(|k| l[(k / dim, k % dim)] as f32).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn l(&self) -> nalgebra::DMatrix<f64> {
        let d = self.dim();
        nalgebra::DMatrix::from_fn(d, d, |i, j| self.chol[i * d + j] as f64)
    }

    /// `u = L^-1 (code - mean)`.
    pub fn to_white(&self, code: &[f32]) -> Vec<f32> {
        let rhs = nalgebra::DVector::from_fn(self.dim(), |i, _| (code[i] - self.mean[i]) as f64);
        let u = self.l().solve_lower_triangular(&rhs).expect("cholesky factor has a positive diagonal");
        u.iter().map(|&v| v as f32).collect()
    }

    /// `code = mean + L u` for a `[1, dim]` row on the tape.
    fn from_white_var(&self, tape: &mut Tape, u: Var) -> Result<Var> {
        let d = self.dim();
        let lt = Tensor::new([d, d], (0..d * d).map(|k| self.chol[(k % d) * d + k / d]).collect())?;
        let lt = tape.constant(lt)?;
        let mean = tape.constant(Tensor::new([d], self.mean.clone())?)?;
        let v = tape.matmul(u, lt)?;
        Ok(tape.add_bias(v, mean)?)
    }
}

/// Dense sigmoid classifier from a latent code to one value per attribute.
///
/// A circular attribute (hue) is predicted through a `(cos, sin)` pair of
/// heads and decoded back to `[0, 1)`, so values near the wrap stay close.
#[derive(Clone, Debug)]
pub struct AttributeClassifier {
    pub names: Vec<String>,
    pub circular: Vec<bool>,
    pub space: LatentSpace,
    pub dim: usize,
    /// Widths of the hidden leaky-relu layers.
    pub hidden: Vec<usize>,
    pub params: ParamStore,
    /// Editing coordinates; `None` edits the raw code.
    pub whitening: Option<Whitening>,
    layers: Vec<crate::nn::Dense>,
}

impl AttributeClassifier {
    pub fn new(
        names: Vec<String>,
        circular: Vec<bool>,
        space: LatentSpace,
        dim: usize,
        hidden: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(CoreError::InvalidConfig("classifier needs at least one attribute".into()));
        }
        if circular.len() != names.len() {
            return Err(CoreError::InvalidConfig("one circularity flag per attribute".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !names.iter().all(|n| seen.insert(n.as_str())) {
            return Err(CoreError::InvalidConfig("duplicate attribute names".into()));
        }
        let mut rng = substream(seed, "attribute-classifier");
        let mut params = ParamStore::new();
        let gain = crate::nn::lrelu_gain();
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(crate::nn::Dense::new(&mut params, &mut rng, &format!("fc.{i}"), fan_in, h, gain));
            fan_in = h;
        }
        let heads = circular.iter().map(|&c| if c { 2 } else { 1 }).sum();
        layers.push(crate::nn::Dense::new(&mut params, &mut rng, &format!("fc.{}", hidden.len()), fan_in, heads, 1.0));
        Ok(AttributeClassifier {
            names,
            circular,
            space,
            dim,
            hidden,
            params,
            whitening: None,
            layers,
        })
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown attribute '{name}' (known: {})", self.names.join(", "))))
    }

    pub fn n_heads(&self) -> usize {
        self.circular.iter().map(|&c| if c { 2 } else { 1 }).sum()
    }

    /// Head values standing for attribute values `ys`.
    fn encode_heads(&self, ys: &[f32]) -> Vec<f32> {
        self.circular.iter().zip(ys).flat_map(|(&c, &y)| encode_value(c, y)).collect()
    }

    fn decode_heads(&self, heads: &[f32]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.names.len());
        let mut i = 0;
        for &c in &self.circular {
            if c {
                let angle = (heads[i + 1] - 0.5).atan2(heads[i] - 0.5);
                let v = (angle / std::f32::consts::TAU).rem_euclid(1.0);
                out.push(if v >= 1.0 { 0.0 } else { v });
                i += 2;
            } else {
                out.push(heads[i]);
                i += 1;
            }
        }
        out
    }

    fn logits_var(&self, tape: &mut Tape, p: &reform_autodiff::Bound, code: Var) -> Result<Var> {
        let mut h = code;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h)?;
            }
        }
        Ok(h)
    }

    /// Sigmoid squeezed by [`OUTPUT_MARGIN`] so f32 saturation never reaches 0 or 1.
    fn outputs_var(&self, tape: &mut Tape, p: &reform_autodiff::Bound, code: Var) -> Result<Var> {
        let l = self.logits_var(tape, p, code)?;
        let y = tape.sigmoid(l)?;
        let y = tape.scale(y, 1.0 - 2.0 * OUTPUT_MARGIN)?;
        Ok(tape.add_scalar(y, OUTPUT_MARGIN)?)
    }

    fn check_code(&self, code: &LatentCode) -> Result<()> {
        if code.space != self.space {
            return Err(CoreError::InvalidCode(format!(
                "classifier works on {:?}-space codes, got {:?}",
                self.space, code.space
            )));
        }
        if code.dim() != self.dim {
            return Err(CoreError::InvalidCode(format!("expected dimension {}, got {}", self.dim, code.dim())));
        }
        Ok(())
    }

    pub fn predict(&self, code: &LatentCode) -> Result<Vec<f32>> {
        self.check_code(code)?;
        Ok(self.predict_batch(&code.to_tensor())?.remove(0))
    }

    pub fn predict_batch(&self, codes: &Tensor) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let c = tape.constant(codes.clone())?;
        let y = self.outputs_var(&mut tape, &p, c)?;
        Ok(tape.value(y).data().chunks(self.n_heads()).map(|h| self.decode_heads(h)).collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "attribute_classifier",
            "names": self.names,
            "circular": self.circular,
            "space": self.space,
            "dim": self.dim,
            "hidden": self.hidden,
            "whitened": self.whitening.is_some(),
        }));
        c.extend_from_store("", &self.params);
        if let Some(wh) = &self.whitening {
            c.push("whitening.mean", Tensor::new([self.dim], wh.mean.clone())?);
            c.push("whitening.chol", Tensor::new([self.dim, self.dim], wh.chol.clone())?);
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        expect_kind(c, "attribute_classifier")?;
        let m = &c.metadata;
        let field = |k: &str| m[k].as_u64().map(|v| v as usize).ok_or_else(|| CoreError::Checkpoint(format!("missing '{k}'")));
        let names: Vec<String> = serde_json::from_value(m["names"].clone())?;
        let circular = match m.get("circular") {
            Some(c) => serde_json::from_value(c.clone())?,
            None => vec![false; names.len()],
        };
        let mut ff = AttributeClassifier::new(
            names,
            circular,
            serde_json::from_value(m["space"].clone())?,
            field("dim")?,
            serde_json::from_value(m["hidden"].clone())?,
            0,
        )?;
        c.load_into("", &mut ff.params)?;
        if m["whitened"].as_bool().unwrap_or(false) {
            let mean = c.get("whitening.mean")?;
            let chol = c.get("whitening.chol")?;
            if mean.shape() != [ff.dim] || chol.shape() != [ff.dim, ff.dim] {
                return Err(CoreError::Checkpoint("whitening tensors do not match the code dimension".into()));
            }
            ff.whitening = Some(Whitening { mean: mean.data().to_vec(), chol: chol.data().to_vec() });
        }
        Ok(ff)
    }
}

/// The `y` vector: one optional target per classifier output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeTarget {
    pub values: Vec<Option<f32>>,
}

impl AttributeTarget {
    /// Builds a target from `(name, y)` pairs; `y` must lie in `[0, 1]` and
    /// is clamped into the open interval.
    pub fn from_pairs(names: &[String], pairs: &[(String, f32)]) -> Result<Self> {
        let mut values = vec![None; names.len()];
        for (name, y) in pairs {
            let k = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| CoreError::InvalidArgument(format!("unknown attribute '{name}'")))?;
            if values[k].is_some() {
                return Err(CoreError::InvalidArgument(format!("attribute '{name}' set twice")));
            }
            values[k] = Some(clamp_target(*y)?);
        }
        Ok(AttributeTarget { values })
    }

    pub fn single(names: &[String], name: &str, y: f32) -> Result<Self> {
        Self::from_pairs(names, &[(name.to_string(), y)])
    }

    pub fn num_set(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Whether every set value is within [`CONVERGENCE_TOLERANCE`] of
    /// `outputs`, measured around the circle where `circular` says so.
    pub fn satisfied_by(&self, outputs: &[f32], circular: &[bool]) -> bool {
        self.values.iter().zip(outputs).zip(circular).all(|((y, &o), &c)| {
            y.is_none_or(|y| {
                let d = if c { hue_distance(y, o) } else { (y - o).abs() };
                d < CONVERGENCE_TOLERANCE
            })
        })
    }
}

fn encode_value(circular: bool, y: f32) -> Vec<f32> {
    if circular {
        let a = y * std::f32::consts::TAU;
        vec![0.5 + CIRCLE_RADIUS * a.cos(), 0.5 + CIRCLE_RADIUS * a.sin()]
    } else {
        vec![y]
    }
}

pub fn clamp_target(y: f32) -> Result<f32> {
    if !(0.0..=1.0).contains(&y) {
        return Err(CoreError::InvalidArgument(format!("target {y} outside (0, 1)")));
    }
    Ok(y.clamp(TARGET_MARGIN, 1.0 - TARGET_MARGIN))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReformResult {
    pub code: LatentCode,
    /// Classifier outputs at the start and after every accepted step.
    pub trace: Vec<Vec<f32>>,
    pub steps_used: usize,
    pub converged: bool,
}

struct Objective {
    value: f64,
    outputs: Vec<f32>,
    code: Tensor,
    /// Gradient with respect to the optimization variable.
    grad: Tensor,
}

/// Evaluates at optimization variable `x`: the whitened coordinates when the
/// classifier has a [`Whitening`], the code otherwise.
fn objective(ff: &AttributeClassifier, target: &AttributeTarget, x: &Tensor, z0: &Tensor, lambda: f64) -> Result<Objective> {
    let k = ff.n_heads();
    let mut tape = Tape::new();
    let p = ff.params.bind(&mut tape, false)?;
    let xv = tape.leaf(x.clone(), true)?;
    let c = match &ff.whitening {
        Some(wh) => wh.from_white_var(&mut tape, xv)?,
        None => xv,
    };
    let y = ff.outputs_var(&mut tape, &p, c)?;
    let set: Vec<f32> = target.values.iter().map(|v| if v.is_some() { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::new([1, k], ff.circular.iter().zip(&set).flat_map(|(&c, &m)| vec![m; if c { 2 } else { 1 }]).collect())?;
    let goal = Tensor::new([1, k], ff.encode_heads(&target.values.iter().map(|v| v.unwrap_or(0.0)).collect::<Vec<_>>()))?;
    let goal = tape.constant(goal)?;
    let mask = tape.constant(mask)?;
    let diff = tape.sub(y, goal)?;
    let diff = tape.mul(diff, mask)?;
    let sq = tape.square(diff)?;
    let mut loss = tape.sum(sq)?;
    if lambda > 0.0 {
        let anchor = tape.constant(z0.clone())?;
        let d = tape.sub(c, anchor)?;
        let d2 = tape.square(d)?;
        let s = tape.sum(d2)?;
        let s = tape.scale(s, lambda)?;
        loss = tape.add(loss, s)?;
    }
    let grad = tape.backward(loss)?.wrt(xv);
    Ok(Objective {
        value: tape.value(loss).data()[0] as f64,
        outputs: ff.decode_heads(tape.value(y).data()),
        code: tape.value(c).clone(),
        grad,
    })
}

/// Minimizes `sum_k (y_k - FF_k(z))^2 + lambda * |z - z0|^2` from `z0`.
///
/// Steps that would increase the objective are rejected and the learning
/// rate halved, so the objective is non-increasing along the trace; accepted
/// steps let it grow back toward the configured rate.
/// `max_steps` bounds proposals, accepted or not.
pub fn reformulate(
    z0: &LatentCode,
    ff: &AttributeClassifier,
    target: &AttributeTarget,
    cfg: &OptimizerConfig,
    lambda_anchor: f64,
) -> Result<ReformResult> {
    cfg.validate()?;
    ff.check_code(z0)?;
    if target.values.len() != ff.names.len() {
        return Err(CoreError::InvalidArgument("target length differs from classifier outputs".into()));
    }
    if target.num_set() == 0 {
        return Err(CoreError::InvalidArgument("target sets no attribute".into()));
    }
    if !(lambda_anchor >= 0.0 && lambda_anchor.is_finite()) {
        return Err(CoreError::InvalidArgument(format!("lambda_anchor {lambda_anchor} must be non-negative")));
    }
    let anchor = z0.to_tensor();
    let mut x = match &ff.whitening {
        Some(wh) => Tensor::new([1, ff.dim], wh.to_white(&z0.values))?,
        None => anchor.clone(),
    };
    let mut current = objective(ff, target, &x, &anchor, lambda_anchor)?;
    let mut trace = vec![current.outputs.clone()];
    let mut state = OptimizerState::new();
    let mut step_cfg = cfg.clone();
    let mut steps_used = 0;
    let mut converged = target.satisfied_by(&current.outputs, &ff.circular);
    for _ in 0..cfg.max_steps {
        if converged {
            break;
        }
        let mut proposal = x.clone();
        let mut next_state = state.clone();
        step(std::slice::from_mut(&mut proposal), &[current.grad.clone()], &step_cfg, &mut next_state)?;
        let candidate = objective(ff, target, &proposal, &anchor, lambda_anchor)?;
        if !candidate.value.is_finite() {
            return Err(CoreError::NonFinite("reformulation objective is not finite".into()));
        }
        if candidate.value <= current.value {
            let improvement = current.value - candidate.value;
            step_cfg.learning_rate = (step_cfg.learning_rate * 1.25).min(cfg.learning_rate);
            x = proposal;
            state = next_state;
            current = candidate;
            trace.push(current.outputs.clone());
            steps_used += 1;
            converged = target.satisfied_by(&current.outputs, &ff.circular);
            if cfg.tolerance > 0.0 && improvement < cfg.tolerance {
                break;
            }
        } else {
            step_cfg.learning_rate *= 0.5;
        }
    }
    // No accepted step leaves the start code bit-exact.
    let code = if steps_used == 0 { z0.values.clone() } else { current.code.into_data() };
    Ok(ReformResult {
        code: LatentCode::new(z0.space, code)?,
        trace,
        steps_used,
        converged,
    })
}

/// Joint edit over every set component of `target`.
pub fn mix_attributes(
    z0: &LatentCode,
    ff: &AttributeClassifier,
    target: &AttributeTarget,
    cfg: &OptimizerConfig,
) -> Result<ReformResult> {
    reformulate(z0, ff, target, cfg, 0.0)
}

/// One [`reformulate`] per `y` value of `attr`, all from `z0`.
pub fn explore_attribute(
    z0: &LatentCode,
    ff: &AttributeClassifier,
    attr: &str,
    y_values: &[f32],
    cfg: &OptimizerConfig,
    lambda_anchor: f64,
) -> Result<Vec<ReformResult>> {
    ff.index_of(attr)?;
    y_values
        .iter()
        .map(|&y| reformulate(z0, ff, &AttributeTarget::single(&ff.names, attr, y)?, cfg, lambda_anchor))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Codes sampled from the generator, labeled by the oracle on their images.
    SelfLabeled,
    /// Labeled dataset images encoded with the feedforward encoder.
    EncodedReal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub seed: u64,
    pub mode: LabelMode,
    pub n_samples: usize,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f32,
    pub max_mae: f32,
    /// Training labels are squeezed into `[s, 1 - s]` so logits stay finite.
    pub label_smoothing: f32,
    /// Share of self-labeled samples drawn at perturbed codes
    /// `w + scale * L eps` around generator samples, so the classifier has
    /// oracle labels along the paths edits actually take.
    pub perturbed_fraction: f32,
    /// Perturbation size in whitened units.
    pub perturbation_scale: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            seed: 0,
            mode: LabelMode::SelfLabeled,
            n_samples: 4000,
            hidden: vec![64, 64],
            steps: 3000,
            batch_size: 64,
            learning_rate: 0.003,
            holdout_fraction: 0.1,
            max_mae: 0.15,
            label_smoothing: 0.05,
            perturbed_fraction: 0.5,
            perturbation_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub names: Vec<String>,
    /// Held-out mean absolute error per attribute (circular for hue).
    pub mae: Vec<f32>,
    pub n_train: usize,
    pub n_validation: usize,
    pub skipped: usize,
}

pub fn attribute_names() -> Vec<String> {
    Attribute::ALL.iter().map(|a| a.name().to_string()).collect()
}

pub fn attribute_circularity() -> Vec<bool> {
    Attribute::ALL.iter().map(|&a| a == Attribute::Hue).collect()
}

/// Labeled `(code, oracle values)` pairs for classifier training.
pub fn classifier_pairs(
    g: &Generator,
    cfg: &ClassifierConfig,
    encoder: Option<&FeedforwardEncoder>,
    labeled: Option<&[LabeledImage]>,
) -> Result<(Vec<Vec<f32>>, Vec<[f32; 3]>, usize)> {
    let mut codes = Vec::with_capacity(cfg.n_samples);
    let mut labels = Vec::with_capacity(cfg.n_samples);
    let mut skipped = 0;
    match cfg.mode {
        LabelMode::SelfLabeled => {
            if !(0.0..1.0).contains(&cfg.perturbed_fraction) || !(cfg.perturbation_scale >= 0.0) {
                return Err(CoreError::InvalidConfig("perturbed_fraction must be in [0, 1) and perturbation_scale >= 0".into()));
            }
            let mut rng = substream(cfg.seed, "classifier-samples");
            let dim = g.config.w_dim;
            let n_plain = ((cfg.n_samples as f32 * (1.0 - cfg.perturbed_fraction)).round() as usize).max(2);
            let mut whitening: Option<Whitening> = None;
            while codes.len() < cfg.n_samples {
                let m = (cfg.n_samples - codes.len()).min(100);
                let z = normal_tensor::<f32>(&mut rng, [m, g.config.latent_dim], 1.0);
                let mut w = g.map_batch(&z)?;
                if codes.len() >= n_plain {
                    let wh = match &whitening {
                        Some(wh) => wh,
                        None => whitening.insert(Whitening::fit(&codes)?),
                    };
                    let eps = normal_tensor::<f32>(&mut rng, [m, dim], cfg.perturbation_scale.into());
                    for (row, e) in w.data_mut().chunks_mut(dim).zip(eps.data().chunks(dim)) {
                        for (i, v) in row.iter_mut().enumerate() {
                            *v += (0..=i).map(|j| wh.chol[i * dim + j] * e[j]).sum::<f32>();
                        }
                    }
                }
                let imgs = g.synthesize_batch(&w)?;
                for (img, code) in imgs.iter().zip(w.data().chunks(dim)) {
                    match extract_attributes(img) {
                        Ok(r) => {
                            codes.push(code.to_vec());
                            labels.push(r.values());
                        }
                        Err(CoreError::NoGarment) => skipped += 1,
                        Err(e) => return Err(e),
                    }
                }
                if skipped > cfg.n_samples {
                    return Err(CoreError::Training("generator samples mostly lack a garment".into()));
                }
            }
            // Interleave so the held-out split sees both kinds.
            let mut order: Vec<usize> = (0..codes.len()).collect();
            order.shuffle(&mut substream(cfg.seed, "classifier-order"));
            codes = order.iter().map(|&i| codes[i].clone()).collect();
            labels = order.iter().map(|&i| labels[i]).collect();
        }
        LabelMode::EncodedReal => {
            let e = encoder.ok_or_else(|| CoreError::InvalidArgument("encoded-real mode needs a feedforward encoder".into()))?;
            let data = labeled.ok_or_else(|| CoreError::InvalidArgument("encoded-real mode needs labeled images".into()))?;
            for chunk in data.iter().take(cfg.n_samples).collect::<Vec<_>>().chunks(100) {
                let imgs: Vec<_> = chunk.iter().map(|l| l.image.clone()).collect();
                let enc = e.encode_batch(&imgs)?;
                for (l, code) in chunk.iter().zip(enc.data().chunks(e.dim)) {
                    codes.push(code.to_vec());
                    labels.push([l.params.hue, l.params.length, l.params.pattern.stripedness()]);
                }
            }
        }
    }
    Ok((codes, labels, skipped))
}

/// Trains FF on `[hue, length, stripedness]` labels and fails if any
/// held-out MAE exceeds the ceiling.
pub fn train_attribute_classifier(
    g: &Generator,
    cfg: &ClassifierConfig,
    encoder: Option<&FeedforwardEncoder>,
    labeled: Option<&[LabeledImage]>,
) -> Result<(AttributeClassifier, ClassifierReport)> {
    let (codes, labels, skipped) = classifier_pairs(g, cfg, encoder, labeled)?;
    let space = match cfg.mode {
        LabelMode::SelfLabeled => LatentSpace::W,
        LabelMode::EncodedReal => encoder.expect("checked").space,
    };
    let (ff, report) = fit_classifier(&codes, &labels, space, cfg, skipped)?;
    if let Some((name, mae)) = report.names.iter().zip(&report.mae).find(|(_, &m)| !(m < cfg.max_mae)) {
        return Err(CoreError::Training(format!(
            "classifier held-out MAE for {name} is {mae:.4}, ceiling {}",
            cfg.max_mae
        )));
    }
    tracing::info!(?report, "attribute classifier trained");
    Ok((ff, report))
}

/// Trains without enforcing the MAE ceiling.
pub fn fit_classifier(
    codes: &[Vec<f32>],
    labels: &[[f32; 3]],
    space: LatentSpace,
    cfg: &ClassifierConfig,
    skipped: usize,
) -> Result<(AttributeClassifier, ClassifierReport)> {
    let n = codes.len();
    if n < 10 {
        return Err(CoreError::InvalidArgument("classifier training needs at least 10 samples".into()));
    }
    let dim = codes[0].len();
    let names = attribute_names();
    let mut ff = AttributeClassifier::new(names.clone(), attribute_circularity(), space, dim, cfg.hidden.clone(), cfg.seed)?;
    let heads = ff.n_heads();
    let n_val = ((n as f32 * cfg.holdout_fraction).round() as usize).clamp(1, n - 1);
    let n_train = n - n_val;
    ff.whitening = Some(Whitening::fit(&codes[..n_train])?);
    let opt = OptimizerConfig::adam(cfg.learning_rate, cfg.steps);
    let mut state = OptimizerState::new();
    let mut rng = substream(cfg.seed, "classifier-train");
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut cursor = n_train;
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(n_train) {
            if cursor == n_train {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let x: Vec<f32> = batch.iter().flat_map(|&i| codes[i].iter().copied()).collect();
        let sm = cfg.label_smoothing;
        let y: Vec<f32> = batch
            .iter()
            .flat_map(|&i| {
                let smoothed: Vec<f32> = labels[i].iter().map(|v| sm + (1.0 - 2.0 * sm) * v).collect();
                // Circular heads already sit inside the unit interval.
                let raw = ff.encode_heads(&labels[i]);
                let smooth = ff.encode_heads(&smoothed);
                let mut j = 0;
                ff.circular
                    .iter()
                    .flat_map(|&c| {
                        let n = if c { 2 } else { 1 };
                        let h = if c { &raw[j..j + n] } else { &smooth[j..j + n] };
                        j += n;
                        h.to_vec()
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut tape = Tape::new();
        let p = ff.params.bind(&mut tape, true)?;
        let xv = tape.constant(Tensor::new([batch.len(), dim], x)?)?;
        let logits = ff.logits_var(&mut tape, &p, xv)?;
        let t = tape.constant(Tensor::new([batch.len(), heads], y)?)?;
        let loss = tape.bce_with_logits(logits, t)?;
        let grads = tape.backward(loss)?;
        step(ff.params.tensors_mut(), &p.grads(&grads), &opt, &mut state)?;
    }
    let val_codes = Tensor::new([n_val, dim], codes[n_train..].iter().flatten().copied().collect())?;
    let pred = ff.predict_batch(&val_codes)?;
    let mut mae = vec![0.0f32; names.len()];
    for (p, l) in pred.iter().zip(&labels[n_train..]) {
        for (k, attr) in Attribute::ALL.iter().enumerate() {
            mae[k] += if *attr == Attribute::Hue { hue_distance(p[k], l[k]) } else { (p[k] - l[k]).abs() };
        }
    }
    for m in &mut mae {
        *m /= n_val as f32;
    }
    Ok((
        ff,
        ClassifierReport {
            names,
            mae,
            n_train,
            n_validation: n_val,
            skipped,
        },
    ))
}
