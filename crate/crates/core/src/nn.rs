//! Parameter-owning layer helpers shared by every network.

use reform_autodiff::element::lit;
use reform_autodiff::rng::{normal_tensor, Rng};
use reform_autodiff::{Bound, Element, ParamId, ParamStore, Tape, TensorOf, Var};

use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    /// `[fan_in, fan_out]` weights drawn with std `gain / sqrt(fan_in)`.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        let w = normal_tensor(rng, [fan_in, fan_out], gain / (fan_in as f64).sqrt());
        Dense {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), TensorOf::zeros([fan_out])),
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        Ok(tape.add_bias(y, p[self.bias])?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = normal_tensor(rng, [out_ch, in_ch, kernel, kernel], gain / (fan_in as f64).sqrt());
        Conv {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), TensorOf::zeros([out_ch])),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.weight], self.stride, self.pad)?;
        Ok(tape.add_bias(y, p[self.bias])?)
    }
}

/// He gain for leaky-relu layers.
pub fn lrelu_gain() -> f64 {
    (2.0 / (1.0 + 0.2f64 * 0.2)).sqrt()
}

/// Repeats a `[1, ...]` leaf `n` times along the batch axis.
pub fn broadcast_batch<T: Element>(tape: &mut Tape<T>, x: Var, n: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let rest: usize = shape[1..].iter().product();
    let ones = tape.constant(TensorOf::full([n, 1], lit::<T>(1.0)))?;
    let flat = tape.reshape(x, [1, rest])?;
    let tiled = tape.matmul(ones, flat)?;
    let mut out = shape;
    out[0] = n;
    Ok(tape.reshape(tiled, out)?)
}
