//! Stacked voxel feature encoding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{masked_row_max, masked_row_max_backward, Fcn, FcnTape, Mode, ParamKind, Parameters, Scalar, Tensor};

/// One VFE layer: a shared FCN to `c_out / 2` per point, a voxel-wise max, and
/// the max concatenated back onto every point.
#[derive(Debug, Clone)]
pub struct VfeLayer<S> {
    pub fcn: Fcn<S>,
}

pub struct VfeTape<S> {
    fcn: FcnTape<S>,
    argmax: Vec<usize>,
    t: usize,
}

impl<S: Scalar> VfeLayer<S> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        if !c_out.is_multiple_of(2) || c_out == 0 {
            return Err(Error::Config(format!("VFE output width {c_out} must be even and positive")));
        }
        Ok(VfeLayer { fcn: Fcn::new(c_in, c_out / 2, rng) })
    }

    pub fn c_out(&self) -> usize {
        2 * self.fcn.c_out()
    }

    pub fn forward(&mut self, x: Tensor<S>, counts: &[usize], mode: Mode) -> Result<(Tensor<S>, VfeTape<S>)> {
        let (k, t, _) = check_buffer(&x, counts)?;
        let mask = row_mask(counts, t);
        let (point, fcn) = self.fcn.forward(x, Some(&mask), mode)?;
        let half = self.fcn.c_out();
        let (agg, argmax) = masked_row_max(&point, counts)?;
        let mut out = Tensor::zeros(&[k, t, 2 * half]);
        {
            let (p, a, o) = (point.data(), agg.data(), out.data_mut());
            for v in 0..k {
                for row in 0..counts[v] {
                    let dst = (v * t + row) * 2 * half;
                    o[dst..dst + half].copy_from_slice(&p[(v * t + row) * half..(v * t + row + 1) * half]);
                    o[dst + half..dst + 2 * half].copy_from_slice(&a[v * half..(v + 1) * half]);
                }
            }
        }
        Ok((out, VfeTape { fcn, argmax, t }))
    }

    pub fn backward(&mut self, tape: &VfeTape<S>, counts: &[usize], grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let (k, t, half) = (counts.len(), tape.t, self.fcn.c_out());
        grad_out.ensure_shape(&[k, t, 2 * half], "VFE output gradient")?;
        let g = grad_out.data();
        let mut g_point = Tensor::zeros(&[k, t, half]);
        let mut g_agg = Tensor::zeros(&[k, half]);
        for v in 0..k {
            for row in 0..counts[v] {
                let src = (v * t + row) * 2 * half;
                let dst = (v * t + row) * half;
                for c in 0..half {
                    g_point.data_mut()[dst + c] = g[src + c];
                    g_agg.data_mut()[v * half + c] += g[src + half + c];
                }
            }
        }
        let routed = masked_row_max_backward(t, &tape.argmax, counts, &g_agg);
        for (a, b) in g_point.data_mut().iter_mut().zip(routed.data()) {
            *a += *b;
        }
        self.fcn.backward(&tape.fcn, &g_point)
    }
}

impl<S: Scalar> Parameters<S> for VfeLayer<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        self.fcn.visit(&format!("{prefix}.fcn"), f);
    }
}

/// `[K, T, c_in] -> [K, T, c_out]` through one VFE layer.
pub fn vfe_forward<S: Scalar>(x: Tensor<S>, counts: &[usize], layer: &mut VfeLayer<S>, mode: Mode) -> Result<Tensor<S>> {
    Ok(layer.forward(x, counts, mode)?.0)
}

/// Final FCN followed by a voxel-wise max: one C-vector per voxel.
pub fn voxel_feature<S: Scalar>(x: Tensor<S>, counts: &[usize], fcn: &mut Fcn<S>, mode: Mode) -> Result<Tensor<S>> {
    let t = check_buffer(&x, counts)?.1;
    let (y, _) = fcn.forward(x, Some(&row_mask(counts, t)), mode)?;
    Ok(masked_row_max(&y, counts)?.0)
}

/// The feature learning network: stacked VFE layers and the final FCN + max.
#[derive(Debug, Clone)]
pub struct FeatureNet<S> {
    pub layers: Vec<VfeLayer<S>>,
    pub head: Fcn<S>,
}

pub struct FeatureNetTape<S> {
    layers: Vec<VfeTape<S>>,
    head: FcnTape<S>,
    argmax: Vec<usize>,
    t: usize,
}

impl<S: Scalar> FeatureNet<S> {
    /// `widths` lists `(c_in, c_out)` per VFE layer; `out` is the voxel feature width C.
    pub fn new(widths: &[(usize, usize)], out: usize, rng: &mut impl Rng) -> Result<Self> {
        if widths.first().is_none_or(|w| w.0 != crate::voxel::FEATURE_DIM) {
            return Err(Error::Config("the first VFE layer must take 7 input features".into()));
        }
        if widths.windows(2).any(|w| w[0].1 != w[1].0) {
            return Err(Error::Config(format!("VFE widths do not chain: {widths:?}")));
        }
        let layers = widths.iter().map(|&(i, o)| VfeLayer::new(i, o, rng)).collect::<Result<Vec<_>>>()?;
        let last = widths.last().map(|w| w.1).unwrap_or(crate::voxel::FEATURE_DIM);
        Ok(FeatureNet { layers, head: Fcn::new(last, out, rng) })
    }

    pub fn out_channels(&self) -> usize {
        self.head.c_out()
    }

    /// `[K, T, 7]` buffer to `[K, C]` voxel features.
    pub fn forward(&mut self, x: Tensor<S>, counts: &[usize], mode: Mode) -> Result<(Tensor<S>, FeatureNetTape<S>)> {
        let t = check_buffer(&x, counts)?.1;
        let mut cur = x;
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (y, tape) = layer.forward(cur, counts, mode)?;
            tapes.push(tape);
            cur = y;
        }
        let (y, head) = self.head.forward(cur, Some(&row_mask(counts, t)), mode)?;
        let (feat, argmax) = masked_row_max(&y, counts)?;
        Ok((feat, FeatureNetTape { layers: tapes, head, argmax, t }))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the `[K, T, 7]` buffer.
    pub fn backward(&mut self, tape: &FeatureNetTape<S>, counts: &[usize], grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let g = masked_row_max_backward(tape.t, &tape.argmax, counts, grad_out);
        let mut g = self.head.backward(&tape.head, &g)?;
        for (layer, lt) in self.layers.iter_mut().zip(&tape.layers).rev() {
            g = layer.backward(lt, counts, &g)?;
        }
        Ok(g)
    }
}

impl<S: Scalar> Parameters<S> for FeatureNet<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        self.layers.visit(&format!("{prefix}.vfe"), f);
        self.head.visit(&format!("{prefix}.head"), f);
    }
}

fn row_mask(counts: &[usize], t: usize) -> Vec<bool> {
    counts.iter().flat_map(|&n| (0..t).map(move |row| row < n)).collect()
}

/// Checks `[K, T, C]` layout and that every padded row is exactly zero.
fn check_buffer<S: Scalar>(x: &Tensor<S>, counts: &[usize]) -> Result<(usize, usize, usize)> {
    let &[k, t, c] = x.shape() else {
        return Err(Error::Shape(format!("VFE input must be [K, T, C], got {:?}", x.shape())));
    };
    if counts.len() != k || counts.iter().any(|&n| n > t) {
        return Err(Error::Shape(format!("{} counts for a [{k}, {t}, {c}] buffer", counts.len())));
    }
    for (v, &n) in counts.iter().enumerate() {
        if x.data()[(v * t + n) * c..(v + 1) * t * c].iter().any(|&e| e != S::zero()) {
            return Err(Error::Invariant(format!("voxel {v} has non-zero padding rows")));
        }
    }
    Ok((k, t, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{flatten_grads, flatten_weights, grad_check, gradcheck::scalarize, load_weights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn buffer(counts: &[usize], t: usize, c: usize, rng: &mut impl Rng) -> Tensor<f64> {
        let mut x = Tensor::zeros(&[counts.len(), t, c]);
        for (v, &n) in counts.iter().enumerate() {
            for i in 0..n * c {
                x.data_mut()[v * t * c + i] = rng.random_range(-1.0..1.0);
            }
        }
        x
    }

    /// A net with non-trivial running statistics, so eval mode is not the identity normalization.
    fn warmed_net(rng: &mut ChaCha8Rng) -> FeatureNet<f64> {
        let mut net = FeatureNet::new(&[(7, 8), (8, 16)], 12, rng).unwrap();
        for _ in 0..5 {
            let counts = [4, 3, 5, 2];
            net.forward(buffer(&counts, 6, 7, rng), &counts, Mode::Train).unwrap();
        }
        net
    }

    #[test]
    fn single_point_aggregate_equals_own_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = VfeLayer::<f64>::new(7, 8, &mut rng).unwrap();
        let x = buffer(&[1], 3, 7, &mut rng);
        let y = vfe_forward(x, &[1], &mut layer, Mode::Eval).unwrap();
        assert_eq!(y.data()[..4], y.data()[4..8]);
        assert!(y.data()[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = warmed_net(&mut rng);
        let x = buffer(&[4], 5, 7, &mut rng);
        let mut xp = x.clone();
        let perm = [2, 0, 3, 1];
        for (dst, &src) in perm.iter().enumerate() {
            xp.data_mut()[dst * 7..(dst + 1) * 7].copy_from_slice(&x.data()[src * 7..(src + 1) * 7]);
        }
        let layer = &mut net.layers[0];
        let y = vfe_forward(x.clone(), &[4], layer, Mode::Eval).unwrap();
        let yp = vfe_forward(xp.clone(), &[4], layer, Mode::Eval).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(yp.data()[dst * 8..dst * 8 + 4], y.data()[src * 8..src * 8 + 4]);
            assert_eq!(yp.data()[dst * 8 + 4..dst * 8 + 8], y.data()[4..8]);
        }
        let f = net.forward(x, &[4], Mode::Eval).unwrap().0;
        let fp = net.forward(xp, &[4], Mode::Eval).unwrap().0;
        for (a, b) in f.data().iter().zip(fp.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn padding_neutrality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = warmed_net(&mut rng);
        let counts = [3, 1, 5];
        let x = buffer(&counts, 5, 7, &mut rng);
        let mut wide = Tensor::zeros(&[3, 9, 7]);
        for v in 0..3 {
            wide.data_mut()[v * 63..v * 63 + 35].copy_from_slice(&x.data()[v * 35..(v + 1) * 35]);
        }
        for mode in [Mode::Eval, Mode::Train] {
            let a = net.forward(x.clone(), &counts, mode).unwrap().0;
            let b = net.forward(wide.clone(), &counts, mode).unwrap().0;
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn duplicate_point_leaves_feature_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut fcn = Fcn::<f64>::new(7, 6, &mut rng);
        fcn.bn.running_mean = Tensor::from_fn(&[6], |_| rng.random_range(-0.5..0.5));
        fcn.bn.running_var = Tensor::from_fn(&[6], |_| rng.random_range(0.5..2.0));
        let x = buffer(&[3], 5, 7, &mut rng);
        let mut dup = x.clone();
        let copy = x.data()[7..14].to_vec();
        dup.data_mut()[21..28].copy_from_slice(&copy);
        let a = voxel_feature(x.clone(), &[3], &mut fcn, Mode::Eval).unwrap();
        let b = voxel_feature(dup, &[4], &mut fcn, Mode::Eval).unwrap();
        assert_eq!(a.data(), b.data());

        // set oracle: per-point FCN in isolation, max over the distinct points
        let mut oracle = vec![f64::NEG_INFINITY; 6];
        for p in 0..3 {
            let row = Tensor::from_vec(&[1, 7], x.data()[p * 7..(p + 1) * 7].to_vec()).unwrap();
            let y = fcn.forward(row, None, Mode::Eval).unwrap().0;
            for c in 0..6 {
                oracle[c] = oracle[c].max(y.data()[c]);
            }
        }
        for (got, want) in a.data().iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn car_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = FeatureNet::<f32>::new(&[(7, 32), (32, 128)], 128, &mut rng).unwrap();
        let counts = [35, 3, 10];
        let x = buffer(&counts, 35, 7, &mut rng).cast::<f32>();
        let (h1, _) = net.layers[0].forward(x.clone(), &counts, Mode::Train).unwrap();
        assert_eq!(h1.shape(), &[3, 35, 32]);
        let (h2, _) = net.layers[1].forward(h1, &counts, Mode::Train).unwrap();
        assert_eq!(h2.shape(), &[3, 35, 128]);
        assert_eq!(net.forward(x, &counts, Mode::Train).unwrap().0.shape(), &[3, 128]);
    }

    #[test]
    fn rejects_dirty_padding_and_odd_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut layer = VfeLayer::<f64>::new(7, 8, &mut rng).unwrap();
        let x = buffer(&[2], 3, 7, &mut rng);
        assert!(matches!(layer.forward(x, &[1], Mode::Train), Err(Error::Invariant(_))));
        assert!(VfeLayer::<f64>::new(7, 7, &mut rng).is_err());
    }

    #[test]
    fn stack_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = FeatureNet::<f64>::new(&[(7, 8), (8, 10)], 6, &mut rng).unwrap();
        let counts = [3, 2, 4];
        let x = buffer(&counts, 4, 7, &mut rng);
        let proj = Tensor::from_fn(&[3, 6], |_| rng.random_range(-1.0..1.0));
        let (y, tape) = net.forward(x.clone(), &counts, Mode::Train).unwrap();
        let gx = net.backward(&tape, &counts, &proj).unwrap();
        let _ = y;

        let occupied: Vec<usize> = (0..x.len()).filter(|&i| (i / 7) % 4 < counts[i / 28]).collect();
        let mut probe = net.clone();
        let rx = crate::nn::grad_check_at(
            |v| {
                let t = Tensor::from_vec(&[3, 4, 7], v.to_vec()).unwrap();
                scalarize(&probe.forward(t, &counts, Mode::Train).unwrap().0, &proj)
            },
            x.data(),
            gx.data(),
            &occupied,
            1e-6,
            1e-4,
        );
        assert!(rx.passed, "input {rx:?}");

        let w = flatten_weights(&mut net);
        let gw = flatten_grads(&mut net);
        let mut probe = net.clone();
        let rw = grad_check(
            |v| {
                load_weights(&mut probe, v);
                scalarize(&probe.forward(x.clone(), &counts, Mode::Train).unwrap().0, &proj)
            },
            &w,
            &gw,
            1e-6,
            1e-4,
        );
        assert!(rw.passed, "weights {rw:?}");
    }
}
