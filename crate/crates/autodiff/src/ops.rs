//! Forward operations. Each records its result on the tape.

use crate::element::{gemm, lit, Element};
use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tape::{sigmoid, Op, Tape, Var, LEAKY_SLOPE, NORM_EPS};
use crate::tensor::TensorOf;

fn same_shape<T: Element>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn expect_rank<T: Element>(tape: &Tape<T>, op: &'static str, v: Var, rank: usize) -> Result<()> {
    if tape.shape(v).len() != rank {
        return Err(AutodiffError::Rank {
            op,
            expected: rank,
            shape: tape.shape(v).to_vec(),
        });
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        same_shape(self, name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = TensorOf::new(self.shape(a).to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k: T = lit(k);
        self.unary("scale", x, |v| v * k, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c: T = lit(c);
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_rank(self, "matmul", a, 2)?;
        expect_rank(self, "matmul", b, 2)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = TensorOf::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a per-channel bias `[C]` to `[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: shape,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let inner: usize = shape[2..].iter().product();
        let ch = shape[1];
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v + b[(i / inner) % ch];
        }
        let value = TensorOf::new(shape, data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    /// Zero-padded 2-D convolution of `[N, Ci, H, W]` with `[Co, Ci, K, K]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        expect_rank(self, "conv2d", x, 4)?;
        expect_rank(self, "conv2d", weight, 4)?;
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if !(1..=2).contains(&stride) {
            return Err(AutodiffError::InvalidArgument(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[2] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kernel: sw[2],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(weight).data());
        let value = TensorOf::new(vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input: x,
                weight,
                geom,
            },
            &[x, weight],
        )
    }

    /// Nearest-neighbour x2 upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        expect_rank(self, "upsample2x", x, 4)?;
        let s = self.shape(x).to_vec();
        let out = kernels::upsample2x_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let value = TensorOf::new(vec![s[0], s[1], 2 * s[2], 2 * s[3]], out)?;
        self.push("upsample2x", value, Op::Upsample2x(x), &[x])
    }

    /// Leaky ReLU with negative slope 0.2.
    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        let slope: T = lit(LEAKY_SLOPE);
        self.unary(
            "leaky_relu",
            x,
            |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Standardizes every `(sample, channel)` plane of `[N, C, H, W]` (eps 1e-8).
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        expect_rank(self, "instance_norm", x, 4)?;
        let s = self.shape(x).to_vec();
        let (out, inv_std) =
            kernels::instance_norm_forward(self.value(x).data(), s[0] * s[1], s[2] * s[3], NORM_EPS);
        let value = TensorOf::new(s, out)?;
        self.push(
            "instance_norm",
            value,
            Op::InstanceNorm { input: x, inv_std },
            &[x],
        )
    }

    /// `x * scale + bias` with per-sample, per-channel `scale`/`bias` of shape `[N, C]`.
    pub fn modulate(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        expect_rank(self, "modulate", x, 4)?;
        let s = self.shape(x).to_vec();
        for v in [scale, bias] {
            if self.shape(v) != [s[0], s[1]] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "modulate",
                    lhs: s,
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let plane = s[2] * s[3];
        let (sv, bv) = (self.value(scale).data(), self.value(bias).data());
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / plane] + bv[i / plane])
            .collect();
        let value = TensorOf::new(s, data)?;
        self.push(
            "modulate",
            value,
            Op::Modulate {
                input: x,
                scale,
                bias,
            },
            &[x, scale, bias],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push("sum", TensorOf::scalar(lit(total)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1) as f64;
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push("mean", TensorOf::scalar(lit(total / n)), Op::Mean(x), &[x])
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mse", a, b)?;
        let n = self.value(a).numel().max(1) as f64;
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        self.push("mse", TensorOf::scalar(lit(total / n)), Op::Mse(a, b), &[a, b])
    }

    /// `ln(1 + e^x)`, elementwise.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, Op::Softplus(x))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets` in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        same_shape(self, "bce_with_logits", logits, targets)?;
        let n = self.value(logits).numel().max(1) as f64;
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(self.value(targets).data())
            .map(|(&x, &t)| (softplus(x) - x * t).as_f64())
            .sum();
        self.push(
            "bce_with_logits",
            TensorOf::scalar(lit(total / n)),
            Op::BceWithLogits(logits, targets),
            &[logits, targets],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Collapses all dims after the first: `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.reshape(x, vec![n, rest])
    }
}

#[inline]
fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
