//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! Every operation evaluates eagerly, checks that its output is finite, and
//! appends itself to the tape. [`Tape::backward`] walks the record in reverse
//! and accumulates adjoints. [`Tape::replay`] re-evaluates the record from its
//! leaves with the same kernels, so replayed values are bitwise equal to the
//! recorded ones.

use crate::conv::{conv2d_backward, conv2d_forward};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Constant,
    Conv2d { input: Var, kernel: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, F),
    AddScalar(Var, F),
    Square(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    Sum(Var),
    WeightedSum(Var, Vec<F>),
    Channel { input: Var, channel: usize },
    ConcreteDropout {
        input: Var,
        logit: Var,
        noise: Vec<F>,
        temperature: F,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(_) => "square",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Channel { .. } => "channel",
            Op::ConcreteDropout { .. } => "concrete_dropout",
        }
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
#[inline]
pub(crate) fn log_sigmoid<F: Scalar>(x: F) -> F {
    let neg = -x;
    -(neg.max(F::zero()) + (-x.abs()).exp().ln_1p())
}

fn map<F: Scalar>(t: &Tensor<F>, f: impl Fn(F) -> F) -> Result<Tensor<F>> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

/// Elementwise binary op where either side may be a one-element tensor.
fn zip<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    } else if b.len() == 1 {
        let y = b.data()[0];
        map(a, |x| f(x, y))
    } else if a.len() == 1 {
        let x = a.data()[0];
        map(b, |y| f(x, y))
    } else {
        Err(Error::Shape(format!(
            "elementwise operands {:?} and {:?} are incompatible",
            a.shape(),
            b.shape()
        )))
    }
}

fn apply<F: Scalar>(op: &Op<F>, values: &[Tensor<F>]) -> Result<Tensor<F>> {
    let v = |var: &Var| &values[var.0];
    match op {
        Op::Leaf | Op::Constant => unreachable!("leaves carry their own value"),
        Op::Conv2d {
            input,
            kernel,
            bias,
        } => conv2d_forward(v(input), v(kernel), v(bias)),
        Op::Add(a, b) => zip(v(a), v(b), |x, y| x + y),
        Op::Sub(a, b) => zip(v(a), v(b), |x, y| x - y),
        Op::Mul(a, b) => zip(v(a), v(b), |x, y| x * y),
        Op::Neg(a) => map(v(a), |x| -x),
        Op::Scale(a, c) => map(v(a), |x| x * *c),
        Op::AddScalar(a, c) => map(v(a), |x| x + *c),
        Op::Square(a) => map(v(a), |x| x * x),
        Op::Exp(a) => map(v(a), |x| x.exp()),
        Op::Log(a) => {
            let t = v(a);
            if let Some(i) = t.data().iter().position(|&x| x <= F::zero()) {
                return Err(Error::Domain(format!(
                    "log of non-positive value {} at element {i}",
                    t.data()[i]
                )));
            }
            map(t, |x| x.ln())
        }
        Op::Sigmoid(a) => map(v(a), sigmoid),
        Op::LogSigmoid(a) => map(v(a), log_sigmoid),
        Op::Relu(a) => map(v(a), |x| x.max(F::zero())),
        Op::Sum(a) => Ok(Tensor::scalar(
            v(a).data().iter().fold(F::zero(), |acc, &x| acc + x),
        )),
        Op::WeightedSum(a, w) => {
            let t = v(a);
            if t.len() != w.len() {
                return Err(Error::Shape(format!(
                    "weighted_sum over {} values with {} weights",
                    t.len(),
                    w.len()
                )));
            }
            Ok(Tensor::scalar(
                t.data()
                    .iter()
                    .zip(w)
                    .fold(F::zero(), |acc, (&x, &c)| acc + x * c),
            ))
        }
        Op::Channel { input, channel } => {
            let t = v(input);
            let s = t.shape();
            if s.len() != 4 || *channel >= s[1] {
                return Err(Error::Shape(format!(
                    "channel {channel} out of range for shape {s:?}"
                )));
            }
            let hw = s[2] * s[3];
            let mut out = Vec::with_capacity(s[0] * hw);
            for b in 0..s[0] {
                let start = (b * s[1] + channel) * hw;
                out.extend_from_slice(&t.data()[start..start + hw]);
            }
            Tensor::new(vec![s[0], 1, s[2], s[3]], out)
        }
        Op::ConcreteDropout {
            input,
            logit,
            noise,
            temperature,
        } => {
            let x = v(input);
            let theta = v(logit).item()?;
            let per_example = dropout_extent(x, noise.len())?;
            let keep_scale = F::one() + theta.exp();
            let mask: Vec<F> = noise
                .iter()
                .map(|&l| sigmoid(-(theta + l) / *temperature))
                .collect();
            let data = x
                .data()
                .chunks_exact(per_example)
                .flat_map(|chunk| {
                    chunk
                        .iter()
                        .zip(&mask)
                        .map(move |(&xi, &m)| xi * m * keep_scale)
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        }
    }
}

fn dropout_extent<F: Scalar>(x: &Tensor<F>, noise_len: usize) -> Result<usize> {
    let per_example: usize = x.shape().iter().skip(1).product();
    if x.shape().len() < 2 || per_example != noise_len {
        return Err(Error::Shape(format!(
            "dropout noise of length {noise_len} does not match activation shape {:?}",
            x.shape()
        )));
    }
    Ok(per_example)
}

/// Adjoints of a scalar loss with respect to every node on the tape.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<F> {
    ops: Vec<Op<F>>,
    values: Vec<Tensor<F>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.values[var.0]
    }

    fn push_leaf(&mut self, op: Op<F>, value: Tensor<F>) -> Result<Var> {
        value.check_finite(op.name())?;
        self.ops.push(op);
        self.values.push(value);
        Ok(Var(self.ops.len() - 1))
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push_leaf(Op::Leaf, value)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push_leaf(Op::Constant, value)
    }

    fn push(&mut self, op: Op<F>) -> Result<Var> {
        let value = apply(&op, &self.values)?;
        value.check_finite(op.name())?;
        self.ops.push(op);
        self.values.push(value);
        Ok(Var(self.ops.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.push(Op::Conv2d {
            input,
            kernel,
            bias,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Result<Var> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.values[a.0].len();
        let s = self.sum(a)?;
        self.scale(s, F::one() / F::from_usize(n).expect("count fits"))
    }

    /// `sum_i a_i * w_i` for constant weights `w`.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<F>) -> Result<Var> {
        self.push(Op::WeightedSum(a, weights))
    }

    /// Selects channel `channel` of an NCHW tensor, producing `[N, 1, H, W]`.
    pub fn channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        self.push(Op::Channel { input, channel })
    }

    /// Concrete-relaxed dropout: `x * sigmoid(-(logit + noise) / t) / (1 - sigmoid(logit))`.
    ///
    /// `noise` holds `log u - log(1 - u)` for one example and is shared across
    /// the batch dimension. `logit` is a one-element node.
    pub fn concrete_dropout(
        &mut self,
        input: Var,
        logit: Var,
        noise: Vec<F>,
        temperature: F,
    ) -> Result<Var> {
        if temperature <= F::zero() {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        self.push(Op::ConcreteDropout {
            input,
            logit,
            noise,
            temperature,
        })
    }

    /// Re-evaluates every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<F>>> {
        let mut out: Vec<Tensor<F>> = Vec::with_capacity(self.values.len());
        for (op, value) in self.ops.iter().zip(&self.values) {
            let t = match op {
                Op::Leaf | Op::Constant => value.clone(),
                _ => apply(op, &out)?,
            };
            out.push(t);
        }
        Ok(out)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let n = self.ops.len();
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for idx in (0..=loss.0).rev() {
            let op = &self.ops[idx];
            if matches!(op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let g = Tensor::new(self.values[idx].shape().to_vec(), g.into_data())?;
            self.propagate(op, idx, &g, &mut grads)?;
        }
        for (idx, op) in self.ops.iter().enumerate() {
            if matches!(op, Op::Constant) {
                grads[idx] = None;
            } else if let Some(g) = grads[idx].take() {
                grads[idx] = Some(Tensor::new(
                    self.values[idx].shape().to_vec(),
                    g.into_data(),
                )?);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op<F>,
        idx: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let val = |v: &Var| &self.values[v.0];
        let out = &self.values[idx];
        let gd = g.data();
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let cg = conv2d_backward(val(input), val(kernel), val(bias), g)?;
                accumulate(grads, *input, cg.input.data())?;
                accumulate(grads, *kernel, cg.kernel.data())?;
                accumulate(grads, *bias, cg.bias.data())?;
            }
            Op::Add(a, b) => {
                accumulate_broadcast(grads, *a, val(a), gd.to_vec())?;
                accumulate_broadcast(grads, *b, val(b), gd.to_vec())?;
            }
            Op::Sub(a, b) => {
                accumulate_broadcast(grads, *a, val(a), gd.to_vec())?;
                accumulate_broadcast(grads, *b, val(b), gd.iter().map(|&x| -x).collect())?;
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let pick = |t: &Tensor<F>, i: usize| {
                    if t.len() == 1 {
                        t.data()[0]
                    } else {
                        t.data()[i]
                    }
                };
                let ga = gd.iter().enumerate().map(|(i, &x)| x * pick(tb, i)).collect();
                let gb = gd.iter().enumerate().map(|(i, &x)| x * pick(ta, i)).collect();
                accumulate_broadcast(grads, *a, ta, ga)?;
                accumulate_broadcast(grads, *b, tb, gb)?;
            }
            Op::Neg(a) => {
                let ga: Vec<F> = gd.iter().map(|&x| -x).collect();
                accumulate(grads, *a, &ga)?;
            }
            Op::Scale(a, c) => {
                let ga: Vec<F> = gd.iter().map(|&x| x * *c).collect();
                accumulate(grads, *a, &ga)?;
            }
            Op::AddScalar(a, _) => accumulate(grads, *a, gd)?,
            Op::Square(a) => {
                let two = F::one() + F::one();
                let ga: Vec<F> = gd
                    .iter()
                    .zip(val(a).data())
                    .map(|(&x, &y)| x * two * y)
                    .collect();
                accumulate(grads, *a, &ga)?;
            }
            Op::Exp(a) => {
                let ga: Vec<F> = gd.iter().zip(out.data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, *a, &ga)?;
            }
            Op::Log(a) => {
                let ga: Vec<F> = gd.iter().zip(val(a).data()).map(|(&x, &y)| x / y).collect();
                accumulate(grads, *a, &ga)?;
            }
            Op::Sigmoid(a) => {
                let ga: Vec<F> = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&x, &s)| x * s * (F::one() - s))
                    .collect();
                accumulate(grads, *a, &ga)?;
            }
            Op::LogSigmoid(a) => {
                let ga: Vec<F> = gd
                    .iter()
                    .zip(val(a).data())
                    .map(|(&x, &y)| x * sigmoid(-y))
                    .collect();
                accumulate(grads, *a, &ga)?;
            }
            Op::Relu(a) => {
                let ga: Vec<F> = gd
                    .iter()
                    .zip(val(a).data())
                    .map(|(&x, &y)| if y > F::zero() { x } else { F::zero() })
                    .collect();
                accumulate(grads, *a, &ga)?;
            }
            Op::Sum(a) => {
                let ga = vec![gd[0]; val(a).len()];
                accumulate(grads, *a, &ga)?;
            }
            Op::WeightedSum(a, w) => {
                let ga: Vec<F> = w.iter().map(|&c| c * gd[0]).collect();
                accumulate(grads, *a, &ga)?;
            }
            Op::Channel { input, channel } => {
                let s = val(input).shape();
                let hw = s[2] * s[3];
                let mut ga = vec![F::zero(); val(input).len()];
                for b in 0..s[0] {
                    let start = (b * s[1] + channel) * hw;
                    ga[start..start + hw].copy_from_slice(&gd[b * hw..(b + 1) * hw]);
                }
                accumulate(grads, *input, &ga)?;
            }
            Op::ConcreteDropout {
                input,
                logit,
                noise,
                temperature,
            } => {
                let x = val(input);
                let theta = val(logit).item()?;
                let per_example = dropout_extent(x, noise.len())?;
                let e_theta = theta.exp();
                let keep_scale = F::one() + e_theta;
                let mask: Vec<F> = noise
                    .iter()
                    .map(|&l| sigmoid(-(theta + l) / *temperature))
                    .collect();
                let mut gx = Vec::with_capacity(x.len());
                let mut gtheta = F::zero();
                for (gchunk, xchunk) in gd
                    .chunks_exact(per_example)
                    .zip(x.data().chunks_exact(per_example))
                {
                    for ((&gi, &xi), &m) in gchunk.iter().zip(xchunk).zip(&mask) {
                        gx.push(gi * m * keep_scale);
                        let dmask = -m * (F::one() - m) / *temperature;
                        gtheta = gtheta + gi * xi * (dmask * keep_scale + m * e_theta);
                    }
                }
                accumulate(grads, *input, &gx)?;
                accumulate(grads, *logit, &[gtheta])?;
            }
        }
        Ok(())
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], var: Var, g: &[F]) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, &x) in existing.data_mut().iter_mut().zip(g) {
                *e = *e + x;
            }
        }
        slot @ None => {
            // Flat until `backward` restores the node's shape.
            *slot = Some(Tensor::new(vec![g.len()], g.to_vec())?);
        }
    }
    Ok(())
}

fn accumulate_broadcast<F: Scalar>(
    grads: &mut [Option<Tensor<F>>],
    var: Var,
    target: &Tensor<F>,
    g: Vec<F>,
) -> Result<()> {
    if target.len() == 1 && g.len() != 1 {
        let s = g.iter().fold(F::zero(), |acc, &x| acc + x);
        accumulate(grads, var, &[s])
    } else {
        accumulate(grads, var, &g)
    }
}
