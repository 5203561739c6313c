use super::{ParamKind, Parameters, Scalar, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization with running statistics.
///
/// The tensor is viewed as `[outer, channels, inner]` around `axis`; statistics
/// are taken over `outer x inner`, restricted to `mask` when one is given.
/// Masked-out positions produce zero output and receive zero gradient.
#[derive(Debug, Clone)]
pub struct BatchNorm<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    layout: (usize, usize, usize),
    mask: Option<Vec<bool>>,
    mode: Mode,
    count: usize,
}

fn layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], S::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], S::one()),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(
        &mut self,
        x: &Tensor<S>,
        axis: usize,
        mask: Option<&[bool]>,
        mode: Mode,
    ) -> Result<(Tensor<S>, BnCache<S>)> {
        if axis >= x.shape().len() || x.dim(axis) != self.channels() {
            return Err(Error::Shape(format!(
                "batchnorm over axis {axis} of {:?} with {} channels",
                x.shape(),
                self.channels()
            )));
        }
        let (outer, c, inner) = layout(x.shape(), axis);
        if let Some(m) = mask {
            if m.len() != outer * inner {
                return Err(Error::Shape(format!("batchnorm mask length {} != {}", m.len(), outer * inner)));
            }
        }
        let active = |o: usize, i: usize| mask.is_none_or(|m| m[o * inner + i]);
        let count = mask.map_or(outer * inner, |m| m.iter().filter(|&&b| b).count());
        let eps = S::from_f64_lossy(self.eps);
        let xd = x.data();

        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::Shape(format!("batchnorm train mode needs >= 2 samples, got {count}")));
                }
                let n = S::from_usize(count).unwrap();
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for ch in 0..c {
                    let mut acc = S::zero();
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        for i in 0..inner {
                            if active(o, i) {
                                acc += xd[base + i];
                            }
                        }
                    }
                    let m = acc / n;
                    let mut acc2 = S::zero();
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        for i in 0..inner {
                            if active(o, i) {
                                let d = xd[base + i] - m;
                                acc2 += d * d;
                            }
                        }
                    }
                    mean[ch] = m;
                    var[ch] = acc2 / n;
                }
                let mom = S::from_f64_lossy(self.momentum);
                let rest = S::one() - mom;
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = mom * *rm + rest * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = mom * *rv + rest * var[ch];
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.data().to_vec(), self.running_var.data().to_vec()),
        };

        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v.max(S::zero()) + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); x.len()];
        let mut out = vec![S::zero(); x.len()];
        let (g, b) = (self.gamma.data(), self.beta.data());
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in 0..inner {
                    if active(o, i) {
                        let xh = (xd[base + i] - mean[ch]) * inv_std[ch];
                        xhat[base + i] = xh;
                        out[base + i] = g[ch] * xh + b[ch];
                    }
                }
            }
        }
        let cache = BnCache {
            xhat,
            inv_std,
            layout: (outer, c, inner),
            mask: mask.map(|m| m.to_vec()),
            mode,
            count,
        };
        Ok((Tensor::from_vec(x.shape(), out)?, cache))
    }

    /// Accumulates `gamma`/`beta` gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &BnCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let (outer, c, inner) = cache.layout;
        if grad_out.len() != outer * c * inner {
            return Err(Error::Shape("batchnorm backward: gradient length mismatch".into()));
        }
        let mask = cache.mask.as_deref();
        let active = |o: usize, i: usize| mask.is_none_or(|m| m[o * inner + i]);
        let gy = grad_out.data();
        let mut sum_g = vec![S::zero(); c];
        let mut sum_gx = vec![S::zero(); c];
        for ch in 0..c {
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                for i in 0..inner {
                    if active(o, i) {
                        sum_g[ch] += gy[base + i];
                        sum_gx[ch] += gy[base + i] * cache.xhat[base + i];
                    }
                }
            }
        }
        self.gamma.accumulate_grad(&sum_gx);
        self.beta.accumulate_grad(&sum_g);

        let gamma = self.gamma.data();
        let mut gx = vec![S::zero(); gy.len()];
        let n = S::from_usize(cache.count.max(1)).unwrap();
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let scale = gamma[ch] * cache.inv_std[ch];
                for i in 0..inner {
                    if !active(o, i) {
                        continue;
                    }
                    let g = gy[base + i];
                    gx[base + i] = match cache.mode {
                        Mode::Eval => scale * g,
                        Mode::Train => {
                            scale * (g - sum_g[ch] / n - cache.xhat[base + i] * sum_gx[ch] / n)
                        }
                    };
                }
            }
        }
        Tensor::from_vec(grad_out.shape(), gx)
    }
}

impl<S: Scalar> Parameters<S> for BatchNorm<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma, ParamKind::Weight);
        f(&format!("{prefix}.beta"), &mut self.beta, ParamKind::Weight);
        f(&format!("{prefix}.running_mean"), &mut self.running_mean, ParamKind::Buffer);
        f(&format!("{prefix}.running_var"), &mut self.running_var, ParamKind::Buffer);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, scalarize};
    use crate::nn::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_mode_constant_at_running_mean_is_zero() {
        let mut bn = BatchNorm::<f64>::new(3);
        bn.running_mean = Tensor::full(&[3], 2.5);
        let x = Tensor::full(&[4, 3], 2.5);
        let (y, _) = bn.forward(&x, 1, None, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = init::normal::<f64>(&[4, 3, 5], 3.0, &mut rng).map(|v| v + 7.0);
        let mut bn = BatchNorm::<f64>::new(3);
        let (y, _) = bn.forward(&x, 1, None, Mode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|o| (0..5).map(move |i| (o * 3 + ch) * 5 + i)).map(|k| y.data()[k]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
        // running stats moved by (1 - momentum) toward the batch stats
        assert!(bn.running_mean.data()[0] > 0.0);
    }

    #[test]
    fn masked_positions_are_excluded() {
        let x = Tensor::<f64>::from_vec(&[4, 1], vec![1.0, 3.0, 100.0, -50.0]).unwrap();
        let mask = [true, true, false, false];
        let mut bn = BatchNorm::<f64>::new(1);
        let (y, _) = bn.forward(&x, 1, Some(&mask), Mode::Train).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4 && (y.data()[1] - 1.0).abs() < 1e-4);
        assert_eq!(&y.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn single_sample_train_mode_is_rejected() {
        let mut bn = BatchNorm::<f64>::new(2);
        assert!(bn.forward(&Tensor::zeros(&[1, 2]), 1, None, Mode::Train).is_err());
    }

    fn check_mode(mode: Mode, mask: Option<Vec<bool>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = [3, 2, 4];
        let x = init::normal::<f64>(&shape, 1.0, &mut rng);
        let proj = init::normal::<f64>(&shape, 1.0, &mut rng);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = init::uniform(&[2], 0.5, 1.5, &mut rng);
        bn.beta = init::normal(&[2], 1.0, &mut rng);
        bn.running_mean = init::normal(&[2], 1.0, &mut rng);
        bn.running_var = init::uniform(&[2], 0.5, 2.0, &mut rng);
        let m = mask.as_deref();
        let (_, cache) = bn.clone().forward(&x, 1, m, mode).unwrap();
        let gx = bn.clone().backward(&cache, &proj).unwrap();
        let r = grad_check(
            |v| {
                let t = Tensor::from_vec(&shape, v.to_vec()).unwrap();
                scalarize(&bn.clone().forward(&t, 1, m, mode).unwrap().0, &proj)
            },
            x.data(),
            gx.data(),
            1e-5,
            1e-4,
        );
        assert!(r.passed, "{mode:?}: {r:?}");

        let mut bn2 = bn.clone();
        bn2.backward(&cache, &proj).unwrap();
        let gg = bn2.gamma.grad().unwrap().to_vec();
        let r = grad_check(
            |v| {
                let mut b = bn.clone();
                b.gamma = Tensor::from_vec(&[2], v.to_vec()).unwrap();
                scalarize(&b.forward(&x, 1, m, mode).unwrap().0, &proj)
            },
            bn.gamma.data(),
            &gg,
            1e-5,
            1e-4,
        );
        assert!(r.passed, "gamma {mode:?}: {r:?}");
    }

    #[test]
    fn gradients_match_central_differences() {
        check_mode(Mode::Train, None);
        check_mode(Mode::Eval, None);
        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
        check_mode(Mode::Train, Some(mask));
    }
}
