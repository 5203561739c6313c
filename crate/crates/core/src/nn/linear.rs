use rand::Rng;

use super::{init, matmul, ParamKind, Parameters, Scalar, Tensor};
use crate::error::{Error, Result};

/// Affine map over the last axis: `y = x W + b`, `W` is `c_in x c_out`.
pub fn linear<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (c_in, c_out) = check_shapes(x, weight, bias)?;
    let rows = x.len() / c_in.max(1);
    let mut out = Vec::with_capacity(rows * c_out);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    matmul(rows, c_in, c_out, x.data(), false, weight.data(), false, S::one(), &mut out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = c_out;
    Tensor::from_vec(&shape, out)
}

pub struct LinearGrads<S> {
    pub input: Tensor<S>,
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<LinearGrads<S>> {
    let c_in = weight.dim(0);
    let c_out = weight.dim(1);
    let rows = x.len() / c_in.max(1);
    if grad_out.len() != rows * c_out {
        return Err(Error::Shape(format!(
            "linear backward: grad {:?} vs input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let mut gx = vec![S::zero(); rows * c_in];
    matmul(rows, c_out, c_in, grad_out.data(), false, weight.data(), true, S::zero(), &mut gx);
    let mut gw = vec![S::zero(); c_in * c_out];
    matmul(c_in, rows, c_out, x.data(), true, grad_out.data(), false, S::zero(), &mut gw);
    let mut gb = vec![S::zero(); c_out];
    for row in grad_out.data().chunks_exact(c_out) {
        for (acc, &g) in gb.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(LinearGrads { input: Tensor::from_vec(x.shape(), gx)?, weight: gw, bias: gb })
}

fn check_shapes<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<(usize, usize)> {
    if w.shape().len() != 2 || b.shape() != [w.dim(1)] {
        return Err(Error::Shape(format!("linear params {:?} / {:?}", w.shape(), b.shape())));
    }
    match x.shape().last() {
        Some(&c) if c == w.dim(0) => Ok((w.dim(0), w.dim(1))),
        _ => Err(Error::Shape(format!("linear input {:?} vs weight {:?}", x.shape(), w.shape()))),
    }
}

#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: init::fan_in_uniform(&[c_in, c_out], c_in, rng),
            bias: init::fan_in_uniform(&[c_out], c_in, rng),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        linear(x, &self.weight, &self.bias)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let g = linear_backward(x, &self.weight, grad_out)?;
        self.weight.accumulate_grad(&g.weight);
        self.bias.accumulate_grad(&g.bias);
        Ok(g.input)
    }
}

impl<S: Scalar> Parameters<S> for Linear<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        f(&format!("{prefix}.weight"), &mut self.weight, ParamKind::Weight);
        f(&format!("{prefix}.bias"), &mut self.bias, ParamKind::Weight);
    }
}
