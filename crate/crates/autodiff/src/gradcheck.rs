//! Central finite-difference gradient checking.
//!
//! The numeric side uses forward evaluations only, so it shares no code with
//! the backward pass it audits. Run it on `f64` tapes.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::TensorOf;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<TensorOf<f64>>,
    pub numeric: Vec<TensorOf<f64>>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Relative error between two gradient vectors; both near zero counts as agreement.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares `backward` against central differences with step `h` for every
/// element of every input. `f` builds a scalar loss from the input vars.
pub fn check<F>(inputs: &[TensorOf<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[TensorOf<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| tape.param(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<_> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = TensorOf::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        numeric.push(g);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .collect();
    Ok(GradCheckReport {
        rel_errors,
        analytic,
        numeric,
    })
}

/// Outcome of checking one op (or one composed network) over many random instances.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub instances: usize,
    pub worst_rel_error: f64,
}

type Builder = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    /// Draws input tensors for one instance.
    inputs: fn(&mut Rng) -> Vec<TensorOf<f64>>,
    build: Builder,
}

use crate::rng::{normal_tensor, uniform_tensor, Rng};
use rand::Rng as _;

fn away_from_zero(rng: &mut Rng, shape: Vec<usize>) -> TensorOf<f64> {
    // Keep leaky-relu inputs clear of the kink so a +-h probe stays on one side.
    TensorOf::from_fn(shape, |_| {
        let mag = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Reduces an arbitrary tensor to a scalar with fixed pseudo-random weights,
/// so every output element contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let weights = TensorOf::from_fn(shape, |i| ((i as f64 + 1.0) * 0.618_033_988_7).fract() - 0.5);
    let w = tape.constant(weights)?;
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

fn op_cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            inputs: |r| vec![normal_tensor(r, vec![3, 4], 1.0), normal_tensor(r, vec![3, 4], 1.0)],
            build: |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y)
            },
        },
        Case {
            name: "sub",
            inputs: |r| vec![normal_tensor(r, vec![3, 4], 1.0), normal_tensor(r, vec![3, 4], 1.0)],
            build: |t, v| {
                let y = t.sub(v[0], v[1])?;
                project(t, y)
            },
        },
        Case {
            name: "mul",
            inputs: |r| vec![normal_tensor(r, vec![2, 5], 1.0), normal_tensor(r, vec![2, 5], 1.0)],
            build: |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y)
            },
        },
        Case {
            name: "mul (shared operand)",
            inputs: |r| vec![normal_tensor(r, vec![6], 1.0)],
            build: |t, v| {
                let y = t.mul(v[0], v[0])?;
                project(t, y)
            },
        },
        Case {
            name: "scale",
            inputs: |r| vec![normal_tensor(r, vec![7], 1.0)],
            build: |t, v| {
                let y = t.scale(v[0], -1.7)?;
                project(t, y)
            },
        },
        Case {
            name: "add_scalar",
            inputs: |r| vec![normal_tensor(r, vec![7], 1.0)],
            build: |t, v| {
                let y = t.add_scalar(v[0], 0.3)?;
                let y = t.square(y)?;
                project(t, y)
            },
        },
        Case {
            name: "matmul",
            inputs: |r| vec![normal_tensor(r, vec![3, 4], 1.0), normal_tensor(r, vec![4, 5], 1.0)],
            build: |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y)
            },
        },
        Case {
            name: "add_bias",
            inputs: |r| vec![normal_tensor(r, vec![2, 3, 2, 2], 1.0), normal_tensor(r, vec![3], 1.0)],
            build: |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                project(t, y)
            },
        },
        Case {
            name: "conv2d stride 1",
            inputs: |r| vec![normal_tensor(r, vec![2, 2, 5, 5], 1.0), normal_tensor(r, vec![3, 2, 3, 3], 0.5)],
            build: |t, v| {
                let y = t.conv2d(v[0], v[1], 1, 1)?;
                project(t, y)
            },
        },
        Case {
            name: "conv2d stride 2",
            inputs: |r| vec![normal_tensor(r, vec![2, 2, 6, 6], 1.0), normal_tensor(r, vec![3, 2, 3, 3], 0.5)],
            build: |t, v| {
                let y = t.conv2d(v[0], v[1], 2, 1)?;
                project(t, y)
            },
        },
        Case {
            name: "conv2d 1x1",
            inputs: |r| vec![normal_tensor(r, vec![1, 3, 4, 4], 1.0), normal_tensor(r, vec![2, 3, 1, 1], 0.5)],
            build: |t, v| {
                let y = t.conv2d(v[0], v[1], 1, 0)?;
                project(t, y)
            },
        },
        Case {
            name: "upsample2x",
            inputs: |r| vec![normal_tensor(r, vec![2, 2, 3, 3], 1.0)],
            build: |t, v| {
                let y = t.upsample2x(v[0])?;
                project(t, y)
            },
        },
        Case {
            name: "leaky_relu",
            inputs: |r| vec![away_from_zero(r, vec![3, 5])],
            build: |t, v| {
                let y = t.leaky_relu(v[0])?;
                project(t, y)
            },
        },
        Case {
            name: "tanh",
            inputs: |r| vec![normal_tensor(r, vec![9], 1.0)],
            build: |t, v| {
                let y = t.tanh(v[0])?;
                project(t, y)
            },
        },
        Case {
            name: "sigmoid",
            inputs: |r| vec![normal_tensor(r, vec![9], 2.0)],
            build: |t, v| {
                let y = t.sigmoid(v[0])?;
                project(t, y)
            },
        },
        Case {
            name: "instance_norm",
            inputs: |r| vec![normal_tensor(r, vec![2, 2, 3, 3], 1.0)],
            build: |t, v| {
                let y = t.instance_norm(v[0])?;
                project(t, y)
            },
        },
        Case {
            name: "modulate",
            inputs: |r| {
                vec![
                    normal_tensor(r, vec![2, 3, 2, 2], 1.0),
                    normal_tensor(r, vec![2, 3], 1.0),
                    normal_tensor(r, vec![2, 3], 1.0),
                ]
            },
            build: |t, v| {
                let y = t.modulate(v[0], v[1], v[2])?;
                project(t, y)
            },
        },
        Case {
            name: "sum",
            inputs: |r| vec![normal_tensor(r, vec![2, 3], 1.0)],
            build: |t, v| {
                let y = t.square(v[0])?;
                t.sum(y)
            },
        },
        Case {
            name: "mean",
            inputs: |r| vec![normal_tensor(r, vec![2, 3], 1.0)],
            build: |t, v| {
                let y = t.square(v[0])?;
                t.mean(y)
            },
        },
        Case {
            name: "mse",
            inputs: |r| vec![normal_tensor(r, vec![2, 4], 1.0), normal_tensor(r, vec![2, 4], 1.0)],
            build: |t, v| t.mse(v[0], v[1]),
        },
        Case {
            name: "softplus",
            inputs: |r| vec![normal_tensor(r, vec![8], 2.0)],
            build: |t, v| {
                let y = t.softplus(v[0])?;
                project(t, y)
            },
        },
        Case {
            name: "bce_with_logits",
            inputs: |r| vec![normal_tensor(r, vec![2, 4], 2.0), uniform_tensor(r, vec![2, 4], 0.0, 1.0)],
            build: |t, v| t.bce_with_logits(v[0], v[1]),
        },
        Case {
            name: "reshape",
            inputs: |r| vec![normal_tensor(r, vec![2, 6], 1.0)],
            build: |t, v| {
                let y = t.reshape(v[0], vec![3, 4])?;
                project(t, y)
            },
        },
    ]
}

fn composed_cases() -> Vec<Case> {
    vec![
        Case {
            name: "mlp classifier",
            inputs: |r| {
                vec![
                    normal_tensor(r, vec![4, 6], 1.0),
                    normal_tensor(r, vec![6, 8], 0.5),
                    normal_tensor(r, vec![8], 0.5),
                    normal_tensor(r, vec![8, 3], 0.5),
                    normal_tensor(r, vec![3], 0.5),
                    uniform_tensor(r, vec![4, 3], 0.0, 1.0),
                ]
            },
            build: |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_bias(h, v[2])?;
                let h = t.tanh(h)?;
                let o = t.matmul(h, v[3])?;
                let o = t.add_bias(o, v[4])?;
                t.bce_with_logits(o, v[5])
            },
        },
        Case {
            name: "modulated generator block",
            inputs: |r| {
                vec![
                    normal_tensor(r, vec![2, 4], 1.0),
                    normal_tensor(r, vec![2, 2, 3, 3], 1.0),
                    normal_tensor(r, vec![3, 2, 3, 3], 0.4),
                    normal_tensor(r, vec![4, 3], 0.5),
                    normal_tensor(r, vec![4, 3], 0.5),
                    normal_tensor(r, vec![2, 3, 6, 6], 0.5),
                ]
            },
            build: |t, v| {
                let h = t.conv2d(v[1], v[2], 1, 1)?;
                let h = t.upsample2x(h)?;
                let h = t.instance_norm(h)?;
                let s = t.matmul(v[0], v[3])?;
                let s = t.add_scalar(s, 1.0)?;
                let b = t.matmul(v[0], v[4])?;
                let h = t.modulate(h, s, b)?;
                let img = t.tanh(h)?;
                t.mse(img, v[5])
            },
        },
        Case {
            name: "strided discriminator",
            inputs: |r| {
                vec![
                    normal_tensor(r, vec![2, 3, 6, 6], 1.0),
                    normal_tensor(r, vec![4, 3, 3, 3], 0.4),
                    normal_tensor(r, vec![4], 0.2),
                    normal_tensor(r, vec![3, 4, 3, 3], 0.4),
                    normal_tensor(r, vec![12, 1], 0.4),
                ]
            },
            build: |t, v| {
                let h = t.conv2d(v[0], v[1], 2, 1)?;
                let h = t.add_bias(h, v[2])?;
                let h = t.sigmoid(h)?;
                let h = t.conv2d(h, v[3], 2, 1)?;
                let h = t.flatten(h)?;
                let logit = t.matmul(h, v[4])?;
                let neg = t.scale(logit, -1.0)?;
                let l = t.softplus(neg)?;
                t.mean(l)
            },
        },
    ]
}

fn run_cases(cases: Vec<Case>, rng: &mut Rng, instances: usize, h: f64) -> Result<Vec<SuiteEntry>> {
    cases
        .into_iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                let inputs = (case.inputs)(rng);
                let report = check(&inputs, h, case.build)?;
                worst = worst.max(report.max_rel_error());
            }
            Ok(SuiteEntry {
                name: case.name,
                instances,
                worst_rel_error: worst,
            })
        })
        .collect()
}

/// Checks every differentiable op on `instances` random inputs each.
pub fn op_suite(seed: u64, instances: usize, h: f64) -> Result<Vec<SuiteEntry>> {
    run_cases(op_cases(), &mut crate::rng::substream(seed, "gradcheck/ops"), instances, h)
}

/// Checks three composed networks (classifier, modulated generator block,
/// strided discriminator) on `instances` random parameterizations each.
pub fn composed_suite(seed: u64, instances: usize, h: f64) -> Result<Vec<SuiteEntry>> {
    run_cases(
        composed_cases(),
        &mut crate::rng::substream(seed, "gradcheck/composed"),
        instances,
        h,
    )
}
