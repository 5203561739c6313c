use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.max(S::zero()))
}

/// Gradient of [`relu`] given its forward output.
pub fn relu_backward<S: Scalar>(out: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let data = out
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::from_vec(out.shape(), data).expect("same shape")
}

pub fn relu_in_place<S: Scalar>(x: &mut Tensor<S>) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(S::zero()));
}

/// Max over `axis`, removing it. Returns the values and the winning index
/// along `axis` for each output element; ties go to the lowest index.
pub fn maxpool_over_axis<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<(Tensor<S>, Vec<usize>)> {
    let shape = x.shape();
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(Error::Shape(format!("maxpool over axis {axis} of {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut vals = vec![S::zero(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut best = x.data()[o * n * inner + i];
            let mut best_j = 0;
            for j in 1..n {
                let v = x.data()[(o * n + j) * inner + i];
                if v > best {
                    best = v;
                    best_j = j;
                }
            }
            vals[o * inner + i] = best;
            arg[o * inner + i] = best_j;
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    Ok((Tensor::from_vec(&out_shape, vals)?, arg))
}

pub fn maxpool_over_axis_backward<S: Scalar>(
    input_shape: &[usize],
    axis: usize,
    argmax: &[usize],
    grad_out: &Tensor<S>,
) -> Tensor<S> {
    let outer: usize = input_shape[..axis].iter().product();
    let n = input_shape[axis];
    let inner: usize = input_shape[axis + 1..].iter().product();
    let mut gx = Tensor::zeros(input_shape);
    for o in 0..outer {
        for i in 0..inner {
            let k = o * inner + i;
            gx.data_mut()[(o * n + argmax[k]) * inner + i] = grad_out.data()[k];
        }
    }
    gx
}

/// Per-voxel max over the first `counts[k]` rows of a `[K, T, C]` tensor.
///
/// Padded rows never take part. Returns `[K, C]` values and the winning row
/// per element (lowest row on ties). Voxels with zero count produce zeros.
pub fn masked_row_max<S: Scalar>(x: &Tensor<S>, counts: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
    let [k, t, c] = match x.shape() {
        &[k, t, c] => [k, t, c],
        s => return Err(Error::Shape(format!("masked max expects [K, T, C], got {s:?}"))),
    };
    if counts.len() != k || counts.iter().any(|&n| n > t) {
        return Err(Error::Shape(format!("counts do not fit a [{k}, {t}, {c}] buffer")));
    }
    let mut vals = vec![S::zero(); k * c];
    let mut arg = vec![0usize; k * c];
    for (v, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let block = &x.data()[v * t * c..(v + 1) * t * c];
        let out = &mut vals[v * c..(v + 1) * c];
        let win = &mut arg[v * c..(v + 1) * c];
        for ch in 0..c {
            let mut best = S::neg_infinity();
            for row in 0..n {
                let val = block[row * c + ch];
                if val > best {
                    best = val;
                    win[ch] = row;
                }
            }
            out[ch] = best;
        }
    }
    Ok((Tensor::from_vec(&[k, c], vals)?, arg))
}

pub fn masked_row_max_backward<S: Scalar>(
    t: usize,
    argmax: &[usize],
    counts: &[usize],
    grad_out: &Tensor<S>,
) -> Tensor<S> {
    let k = counts.len();
    let c = grad_out.len() / k.max(1);
    let mut gx = Tensor::zeros(&[k, t, c]);
    for v in 0..k {
        if counts[v] == 0 {
            continue;
        }
        for ch in 0..c {
            let row = argmax[v * c + ch];
            gx.data_mut()[(v * t + row) * c + ch] = grad_out.data()[v * c + ch];
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, scalarize};
    use crate::nn::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_values() {
        let x = Tensor::<f64>::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn relu_gradient_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // keep every entry at least 0.1 from the kink
        let x = init::normal::<f64>(&[20], 1.0, &mut rng).map(|v| if v.abs() < 0.1 { v.signum() * 0.5 } else { v });
        let proj = init::normal::<f64>(&[20], 1.0, &mut rng);
        let g = relu_backward(&relu(&x), &proj);
        let r = grad_check(|v| scalarize(&relu(&Tensor::from_vec(&[20], v.to_vec()).unwrap()), &proj), x.data(), g.data(), 1e-6, 1e-4);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn maxpool_is_permutation_invariant() {
        let x = Tensor::<f64>::from_vec(&[3, 2], vec![1.0, 5.0, 4.0, -1.0, 2.0, 0.0]).unwrap();
        let y = Tensor::<f64>::from_vec(&[3, 2], vec![2.0, 0.0, 1.0, 5.0, 4.0, -1.0]).unwrap();
        assert_eq!(maxpool_over_axis(&x, 0).unwrap().0, maxpool_over_axis(&y, 0).unwrap().0);
        assert_eq!(maxpool_over_axis(&x, 0).unwrap().0.data(), &[4.0, 5.0]);
    }

    #[test]
    fn maxpool_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = init::normal::<f64>(&[2, 5, 3], 1.0, &mut rng);
        let proj = init::normal::<f64>(&[2, 3], 1.0, &mut rng);
        let (_, arg) = maxpool_over_axis(&x, 1).unwrap();
        let g = maxpool_over_axis_backward(x.shape(), 1, &arg, &proj);
        let r = grad_check(
            |v| scalarize(&maxpool_over_axis(&Tensor::from_vec(&[2, 5, 3], v.to_vec()).unwrap(), 1).unwrap().0, &proj),
            x.data(),
            g.data(),
            1e-6,
            1e-4,
        );
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn masked_max_ignores_padding() {
        // padded row holds a huge value that must not win
        let x = Tensor::<f64>::from_vec(&[1, 3, 1], vec![-2.0, -3.0, 100.0]).unwrap();
        let (m, arg) = masked_row_max(&x, &[2]).unwrap();
        assert_eq!(m.data(), &[-2.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn masked_max_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let counts = [3, 1, 4];
        let x = init::normal::<f64>(&[3, 4, 2], 1.0, &mut rng);
        let proj = init::normal::<f64>(&[3, 2], 1.0, &mut rng);
        let (_, arg) = masked_row_max(&x, &counts).unwrap();
        let g = masked_row_max_backward(4, &arg, &counts, &proj);
        let r = grad_check(
            |v| scalarize(&masked_row_max(&Tensor::from_vec(&[3, 4, 2], v.to_vec()).unwrap(), &counts).unwrap().0, &proj),
            x.data(),
            g.data(),
            1e-6,
            1e-4,
        );
        assert!(r.passed, "{r:?}");
    }
}
