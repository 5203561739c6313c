//! Minimal differentiable kernels: every operation has an explicit forward
//! and backward pass, verified against central finite differences.

mod activation;
mod batchnorm;
pub mod checkpoint;
mod conv;
pub mod gradcheck;
pub mod init;
mod linear;
pub mod loss;
mod scalar;
mod tensor;

pub use activation::{
    masked_row_max, masked_row_max_backward, maxpool_over_axis, maxpool_over_axis_backward, relu,
    relu_backward, relu_in_place,
};
pub use batchnorm::{BatchNorm, BnCache, Mode, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use checkpoint::Checkpoint;
pub use conv::{
    conv2d, conv2d_backward, conv3d, conv3d_backward, deconv2d, deconv2d_backward, sparse_conv3d,
    sparse_conv3d_backward, Conv, ConvGeometry, ConvGrads, ConvKind, SparseVolume,
};
pub use gradcheck::{flatten_grads, flatten_weights, grad_check, grad_check_at, load_weights, GradCheckReport};
pub use linear::{linear, linear_backward, Linear, LinearGrads};
pub(crate) use scalar::matmul;
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by gradient descent.
    Weight,
    /// Persistent state such as running statistics.
    Buffer,
}

/// Visitor over named parameter tensors, used by checkpoints and optimizers.
pub trait Parameters<S: Scalar> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind));
}

/// Linear + BN + ReLU, shared by every point it is applied to.
#[derive(Debug, Clone)]
pub struct Fcn<S> {
    pub linear: Linear<S>,
    pub bn: BatchNorm<S>,
}

pub struct FcnTape<S> {
    input: Tensor<S>,
    bn: BnCache<S>,
    output: Tensor<S>,
}

impl<S: Scalar> Fcn<S> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl rand::Rng) -> Self {
        Fcn { linear: Linear::new(c_in, c_out, rng), bn: BatchNorm::new(c_out) }
    }

    pub fn c_out(&self) -> usize {
        self.linear.c_out()
    }

    /// Applies the FCN over the last axis. With a mask over the leading
    /// positions, statistics use only the active ones and inactive outputs are zero.
    pub fn forward(&mut self, x: Tensor<S>, mask: Option<&[bool]>, mode: Mode) -> crate::Result<(Tensor<S>, FcnTape<S>)> {
        let pre = self.linear.forward(&x)?;
        let axis = pre.shape().len() - 1;
        let (mut y, bn) = self.bn.forward(&pre, axis, mask, mode)?;
        relu_in_place(&mut y);
        Ok((y.clone(), FcnTape { input: x, bn, output: y }))
    }

    pub fn backward(&mut self, tape: &FcnTape<S>, grad_out: &Tensor<S>) -> crate::Result<Tensor<S>> {
        let g = relu_backward(&tape.output, grad_out);
        let g = self.bn.backward(&tape.bn, &g)?;
        self.linear.backward(&tape.input, &g)
    }
}

impl<S: Scalar> Parameters<S> for Fcn<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        self.linear.visit(&format!("{prefix}.linear"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }
}

/// Convolution + BN + ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<S> {
    pub conv: Conv<S>,
    pub bn: BatchNorm<S>,
}

enum BlockInput<S> {
    Dense(Tensor<S>),
    /// One volume per batch element.
    Sparse(Vec<SparseVolume<S>>),
}

pub struct ConvBlockTape<S> {
    input: BlockInput<S>,
    bn: BnCache<S>,
    output: Tensor<S>,
}

impl<S: Scalar> ConvBlock<S> {
    pub fn new(conv: Conv<S>) -> Self {
        let bn = BatchNorm::new(conv.c_out());
        ConvBlock { conv, bn }
    }

    pub fn forward(&mut self, x: Tensor<S>, mode: Mode) -> crate::Result<(Tensor<S>, ConvBlockTape<S>)> {
        let pre = self.conv.forward(&x)?;
        let (mut y, bn) = self.bn.forward(&pre, 1, None, mode)?;
        relu_in_place(&mut y);
        Ok((y.clone(), ConvBlockTape { input: BlockInput::Dense(x), bn, output: y }))
    }

    /// Batched forward from sparse volumes; output `[N, C_out, D', H', W']`.
    pub fn forward_sparse(&mut self, xs: Vec<SparseVolume<S>>, mode: Mode) -> crate::Result<(Tensor<S>, ConvBlockTape<S>)> {
        let mut data = Vec::new();
        let mut shape = Vec::new();
        for x in &xs {
            let y = self.conv.forward_sparse(x)?;
            shape = y.shape().to_vec();
            data.extend_from_slice(y.data());
        }
        shape.insert(0, xs.len());
        let pre = Tensor::from_vec(&shape, data)?;
        let (mut y, bn) = self.bn.forward(&pre, 1, None, mode)?;
        relu_in_place(&mut y);
        Ok((y.clone(), ConvBlockTape { input: BlockInput::Sparse(xs), bn, output: y }))
    }

    /// Input gradient; for a sparse input, the `[K, C_in]` site gradients of all volumes in order.
    pub fn backward(&mut self, tape: &ConvBlockTape<S>, grad_out: &Tensor<S>) -> crate::Result<Tensor<S>> {
        let g = relu_backward(&tape.output, grad_out);
        let g = self.bn.backward(&tape.bn, &g)?;
        match &tape.input {
            BlockInput::Dense(x) => self.conv.backward(x, &g),
            BlockInput::Sparse(xs) => {
                let per = g.len() / xs.len().max(1);
                let mut out = Vec::new();
                let mut c = 0;
                for (i, x) in xs.iter().enumerate() {
                    let gi = Tensor::from_vec(&g.shape()[1..], g.data()[i * per..(i + 1) * per].to_vec())?;
                    let gx = self.conv.backward_sparse(x, &gi)?;
                    c = gx.dim(1);
                    out.extend_from_slice(gx.data());
                }
                Tensor::from_vec(&[out.len() / c.max(1), c], out)
            }
        }
    }
}

impl<S: Scalar> Parameters<S> for ConvBlock<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }
}

impl<S: Scalar, T: Parameters<S>> Parameters<S> for Vec<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit(&format!("{prefix}.{i}"), f);
        }
    }
}
