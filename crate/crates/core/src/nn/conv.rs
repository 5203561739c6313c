//! Strided, zero-padded 3D/2D convolution and 2D transposed convolution.
//!
//! Cross-correlation convention (no kernel flip). Samples in a batch run in
//! parallel; every reduction happens in a fixed order, so results do not
//! depend on the number of worker threads.

use rand::Rng;
use rayon::prelude::*;

use super::{init, ParamKind, Parameters, Scalar, Tensor};
use crate::error::{Error, Result};

/// Target number of elements in one im2col tile.
const TILE_ELEMS: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        ConvGeometry { kernel, stride, padding }
    }

    /// A 2D geometry embedded as depth-1 3D.
    pub fn planar(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry { kernel: [1, kernel, kernel], stride: [1, stride, stride], padding: [0, padding, padding] }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// `floor((in + 2p - k) / s) + 1` per axis.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if self.stride[a] == 0 || span < self.kernel[a] {
                return Err(Error::Shape(format!(
                    "non-positive output extent on axis {a}: input {}, kernel {}, stride {}, padding {}",
                    input[a], self.kernel[a], self.stride[a], self.padding[a]
                )));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// `(in - 1) s - 2p + k` per axis.
    pub fn transposed_output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a].max(1) - 1) * self.stride[a] + self.kernel[a];
            if input[a] == 0 || full <= 2 * self.padding[a] {
                return Err(Error::Shape(format!("non-positive transposed output extent on axis {a}")));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

/// im2col bookkeeping between a "wide" grid (convolution input) and a
/// "narrow" grid (convolution output).
struct Patches {
    channels: usize,
    wide: [usize; 3],
    narrow: [usize; 3],
    geom: ConvGeometry,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.geom.taps()
    }

    fn narrow_len(&self) -> usize {
        self.narrow.iter().product()
    }

    fn wide_len(&self) -> usize {
        self.wide.iter().product()
    }

    fn tile_len(&self) -> usize {
        (TILE_ELEMS / self.rows().max(1)).max(16).min(self.narrow_len().max(1))
    }

    /// Calls `f(dst, src, len)` for every in-bounds run of taps: column
    /// entries `dst..dst + len` pair with wide entries `src, src + s_W, ...`.
    fn for_each_run(&self, p0: usize, p1: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [wd, wh, ww] = self.wide;
        let [_, nh, nw] = self.narrow;
        let g = &self.geom;
        let [k0, k1, k2] = g.kernel;
        let (sw, pw) = (g.stride[2], g.padding[2] as isize);
        let tl = p1 - p0;
        let mut p = p0;
        while p < p1 {
            let (d, h, w0) = (p / (nh * nw), (p / nw) % nh, p % nw);
            let run = (nw - w0).min(p1 - p);
            let j0 = p - p0;
            let z0 = (d * g.stride[0]) as isize - g.padding[0] as isize;
            let y0 = (h * g.stride[1]) as isize - g.padding[1] as isize;
            let mut row = 0;
            for ch in 0..self.channels {
                let ch_base = ch * wd * wh * ww;
                for a in 0..k0 {
                    let z = z0 + a as isize;
                    for b in 0..k1 {
                        let y = y0 + b as isize;
                        if z < 0 || y < 0 || z as usize >= wd || y as usize >= wh {
                            row += k2;
                            continue;
                        }
                        let line = ch_base + (z as usize * wh + y as usize) * ww;
                        for c in 0..k2 {
                            // x = w * sw + c - pw must lie in [0, ww)
                            let off = c as isize - pw;
                            let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(sw) };
                            let hi = if (ww as isize) <= off { 0 } else { ((ww as isize - off - 1) as usize) / sw + 1 };
                            let (lo, hi) = (lo.max(w0), hi.min(w0 + run));
                            if lo < hi {
                                let x = (lo * sw) as isize + off;
                                f(row * tl + j0 + (lo - w0), line + x as usize, hi - lo);
                            }
                            row += 1;
                        }
                    }
                }
            }
            p += run;
        }
    }

    fn gather<S: Scalar>(&self, wide: &[S], p0: usize, p1: usize, col: &mut [S]) {
        col.iter_mut().for_each(|v| *v = S::zero());
        let sw = self.geom.stride[2];
        self.for_each_run(p0, p1, |dst, src, len| {
            let out = &mut col[dst..dst + len];
            if sw == 1 {
                out.copy_from_slice(&wide[src..src + len]);
            } else {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = wide[src + i * sw];
                }
            }
        });
    }

    fn scatter_add<S: Scalar>(&self, col: &[S], p0: usize, p1: usize, wide: &mut [S]) {
        let sw = self.geom.stride[2];
        self.for_each_run(p0, p1, |src, dst, len| {
            for (i, &v) in col[src..src + len].iter().enumerate() {
                wide[dst + i * sw] += v;
            }
        });
    }

    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let total = self.narrow_len();
        let tl = self.tile_len();
        (0..total.div_ceil(tl)).map(move |i| (i * tl, ((i + 1) * tl).min(total)))
    }
}

fn spatial(shape: &[usize], planar: bool, what: &str) -> Result<(usize, usize, [usize; 3])> {
    match (planar, shape) {
        (false, &[n, c, d, h, w]) => Ok((n, c, [d, h, w])),
        (true, &[n, c, h, w]) => Ok((n, c, [1, h, w])),
        _ => Err(Error::Shape(format!("{what}: unexpected input shape {shape:?}"))),
    }
}

fn out_shape(n: usize, c: usize, dims: [usize; 3], planar: bool) -> Vec<usize> {
    if planar {
        vec![n, c, dims[1], dims[2]]
    } else {
        vec![n, c, dims[0], dims[1], dims[2]]
    }
}

fn sum_partials<S: Scalar>(parts: &[Vec<S>], len: usize) -> Vec<S> {
    let mut acc = vec![S::zero(); len];
    for p in parts {
        for (a, &v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

pub struct ConvGrads<S> {
    pub input: Tensor<S>,
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

fn conv_forward_impl<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    geom: ConvGeometry,
    planar: bool,
) -> Result<Tensor<S>> {
    let (n, ci, in_dims) = spatial(x.shape(), planar, "conv")?;
    let co = weight.dim(0);
    if weight.len() != co * ci * geom.taps() || bias.len() != co {
        return Err(Error::Shape(format!(
            "conv weight {:?} / bias {:?} do not fit {ci} input channels and kernel {:?}",
            weight.shape(),
            bias.shape(),
            geom.kernel
        )));
    }
    let out_dims = geom.output_dims(in_dims)?;
    let patches = Patches { channels: ci, wide: in_dims, narrow: out_dims, geom };
    let (in_len, p_out, rows) = (patches.wide_len(), patches.narrow_len(), patches.rows());
    let mut out = vec![S::zero(); n * co * p_out];
    out.par_chunks_mut(co * p_out).zip(x.data().par_chunks(ci * in_len)).for_each(|(y, xs)| {
        for (c_idx, row) in y.chunks_mut(p_out).enumerate() {
            row.iter_mut().for_each(|v| *v = bias.data()[c_idx]);
        }
        let mut col = Vec::new();
        for (p0, p1) in patches.tiles() {
            let tl = p1 - p0;
            col.resize(rows * tl, S::zero());
            patches.gather(xs, p0, p1, &mut col);
            S::gemm(co, rows, tl, S::one(), weight.data(), rows as isize, 1, &col, tl as isize, 1, S::one(), &mut y[p0..], p_out as isize, 1);
        }
    });
    Tensor::from_vec(&out_shape(n, co, out_dims, planar), out)
}

fn conv_backward_impl<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    geom: ConvGeometry,
    planar: bool,
) -> Result<ConvGrads<S>> {
    let (n, ci, in_dims) = spatial(x.shape(), planar, "conv backward")?;
    let co = weight.dim(0);
    let out_dims = geom.output_dims(in_dims)?;
    let patches = Patches { channels: ci, wide: in_dims, narrow: out_dims, geom };
    let (in_len, p_out, rows) = (patches.wide_len(), patches.narrow_len(), patches.rows());
    if grad_out.len() != n * co * p_out {
        return Err(Error::Shape(format!("conv backward: gradient shape {:?}", grad_out.shape())));
    }
    let per_sample: Vec<(Vec<S>, Vec<S>, Vec<S>)> = x
        .data()
        .par_chunks(ci * in_len)
        .zip(grad_out.data().par_chunks(co * p_out))
        .map(|(xs, gy)| {
            let gb: Vec<S> = gy.chunks(p_out).map(|r| r.iter().copied().sum()).collect();
            let mut gw = vec![S::zero(); co * rows];
            let mut gx = vec![S::zero(); ci * in_len];
            let mut col = Vec::new();
            let mut gcol = Vec::new();
            for (p0, p1) in patches.tiles() {
                let tl = p1 - p0;
                col.resize(rows * tl, S::zero());
                gcol.resize(rows * tl, S::zero());
                patches.gather(xs, p0, p1, &mut col);
                S::gemm(co, tl, rows, S::one(), &gy[p0..], p_out as isize, 1, &col, 1, tl as isize, S::one(), &mut gw, rows as isize, 1);
                S::gemm(rows, co, tl, S::one(), weight.data(), 1, rows as isize, &gy[p0..], p_out as isize, 1, S::zero(), &mut gcol, tl as isize, 1);
                patches.scatter_add(&gcol, p0, p1, &mut gx);
            }
            (gx, gw, gb)
        })
        .collect();
    let mut gx = Vec::with_capacity(x.len());
    for (g, _, _) in &per_sample {
        gx.extend_from_slice(g);
    }
    let gw: Vec<Vec<S>> = per_sample.iter().map(|(_, w, _)| w.clone()).collect();
    let gb: Vec<Vec<S>> = per_sample.iter().map(|(_, _, b)| b.clone()).collect();
    Ok(ConvGrads {
        input: Tensor::from_vec(x.shape(), gx)?,
        weight: sum_partials(&gw, co * rows),
        bias: sum_partials(&gb, co),
    })
}

/// `x: [N, C_in, D, H, W]`, `weight: [C_out, C_in, kd, kh, kw]`.
pub fn conv3d<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>, geom: ConvGeometry) -> Result<Tensor<S>> {
    conv_forward_impl(x, weight, bias, geom, false)
}

pub fn conv3d_backward<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, grad_out: &Tensor<S>, geom: ConvGeometry) -> Result<ConvGrads<S>> {
    conv_backward_impl(x, weight, grad_out, geom, false)
}

/// A sparse `[C, D, H, W]` volume: `features` is `[K, C]` at distinct `coords`.
#[derive(Debug, Clone)]
pub struct SparseVolume<S> {
    pub features: Tensor<S>,
    pub coords: Vec<[usize; 3]>,
    pub grid: [usize; 3],
}

impl<S: Scalar> SparseVolume<S> {
    fn check(&self) -> Result<()> {
        let [d, h, w] = self.grid;
        if self.features.shape().len() != 2 || self.features.dim(0) != self.coords.len() {
            return Err(Error::Shape(format!(
                "sparse volume: {:?} features for {} coordinates",
                self.features.shape(),
                self.coords.len()
            )));
        }
        let mut seen = vec![false; d * h * w];
        for c in &self.coords {
            if c[0] >= d || c[1] >= h || c[2] >= w {
                return Err(Error::Invariant(format!("sparse coordinate {c:?} outside grid {:?}", self.grid)));
            }
            let i = (c[0] * h + c[1]) * w + c[2];
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Invariant(format!("duplicate sparse coordinate {c:?}")));
            }
        }
        Ok(())
    }
}

/// `(tap, output index)` for every output the input site `c` contributes to.
fn sparse_taps(c: [usize; 3], out_dims: [usize; 3], geom: ConvGeometry, mut f: impl FnMut(usize, usize)) {
    let mut tap = 0;
    let mut o = [0usize; 3];
    for a in 0..geom.kernel[0] {
        for b in 0..geom.kernel[1] {
            for k in 0..geom.kernel[2] {
                let mut ok = true;
                for (axis, off) in [a, b, k].into_iter().enumerate() {
                    // input = out * stride + off - pad
                    let num = (c[axis] + geom.padding[axis]) as isize - off as isize;
                    let s = geom.stride[axis] as isize;
                    if num < 0 || num % s != 0 || (num / s) as usize >= out_dims[axis] {
                        ok = false;
                        break;
                    }
                    o[axis] = (num / s) as usize;
                }
                if ok {
                    f(tap, (o[0] * out_dims[1] + o[1]) * out_dims[2] + o[2]);
                }
                tap += 1;
            }
        }
    }
}

/// `conv3d` of the scattered volume, touching only occupied sites. Output `[C_out, D', H', W']`.
pub fn sparse_conv3d<S: Scalar>(x: &SparseVolume<S>, weight: &Tensor<S>, bias: &Tensor<S>, geom: ConvGeometry) -> Result<Tensor<S>> {
    x.check()?;
    let ci = x.features.dim(1);
    let co = bias.len();
    let taps = geom.taps();
    if weight.len() != co * ci * taps {
        return Err(Error::Shape(format!("sparse conv weight {:?} does not fit {ci} -> {co}", weight.shape())));
    }
    let out_dims = geom.output_dims(x.grid)?;
    let p_out: usize = out_dims.iter().product();
    let mut out = vec![S::zero(); co * p_out];
    for (c, row) in out.chunks_mut(p_out).enumerate() {
        row.iter_mut().for_each(|v| *v = bias.data()[c]);
    }
    // [tap][co][ci] so the inner product is contiguous
    let mut wt = vec![S::zero(); taps * co * ci];
    for (i, &v) in weight.data().iter().enumerate() {
        let (oc, rest) = (i / (ci * taps), i % (ci * taps));
        let (ic, t) = (rest / taps, rest % taps);
        wt[(t * co + oc) * ci + ic] = v;
    }
    for (k, &c) in x.coords.iter().enumerate() {
        let f = &x.features.data()[k * ci..(k + 1) * ci];
        sparse_taps(c, out_dims, geom, |t, o| {
            for oc in 0..co {
                let w = &wt[(t * co + oc) * ci..(t * co + oc + 1) * ci];
                out[oc * p_out + o] += w.iter().zip(f).map(|(&a, &b)| a * b).sum::<S>();
            }
        });
    }
    Tensor::from_vec(&[co, out_dims[0], out_dims[1], out_dims[2]], out)
}

/// Parameter gradients and the input gradient at the occupied sites, `[K, C_in]`.
pub fn sparse_conv3d_backward<S: Scalar>(
    x: &SparseVolume<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    geom: ConvGeometry,
) -> Result<ConvGrads<S>> {
    let ci = x.features.dim(1);
    let taps = geom.taps();
    let co = weight.len() / (ci * taps);
    let out_dims = geom.output_dims(x.grid)?;
    let p_out: usize = out_dims.iter().product();
    if grad_out.len() != co * p_out {
        return Err(Error::Shape(format!("sparse conv backward: gradient shape {:?}", grad_out.shape())));
    }
    let gy = grad_out.data();
    let bias: Vec<S> = gy.chunks(p_out).map(|r| r.iter().copied().sum()).collect();
    let mut gw = vec![S::zero(); co * ci * taps];
    let mut gx = vec![S::zero(); x.features.len()];
    for (k, &c) in x.coords.iter().enumerate() {
        let f = &x.features.data()[k * ci..(k + 1) * ci];
        let g = &mut gx[k * ci..(k + 1) * ci];
        sparse_taps(c, out_dims, geom, |t, o| {
            for oc in 0..co {
                let d = gy[oc * p_out + o];
                for ic in 0..ci {
                    let wi = (oc * ci + ic) * taps + t;
                    gw[wi] += d * f[ic];
                    g[ic] += d * weight.data()[wi];
                }
            }
        });
    }
    Ok(ConvGrads { input: Tensor::from_vec(x.features.shape(), gx)?, weight: gw, bias })
}

/// `x: [N, C_in, H, W]`, `weight: [C_out, C_in, k, k]`.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>, geom: ConvGeometry) -> Result<Tensor<S>> {
    conv_forward_impl(x, weight, bias, geom, true)
}

pub fn conv2d_backward<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, grad_out: &Tensor<S>, geom: ConvGeometry) -> Result<ConvGrads<S>> {
    conv_backward_impl(x, weight, grad_out, geom, true)
}

/// Transposed 2D convolution. `x: [N, C_in, H, W]`, `weight: [C_in, C_out, k, k]`.
pub fn deconv2d<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>, geom: ConvGeometry) -> Result<Tensor<S>> {
    let (n, ci, in_dims) = spatial(x.shape(), true, "deconv")?;
    let co = bias.len();
    if weight.len() != ci * co * geom.taps() || weight.dim(0) != ci {
        return Err(Error::Shape(format!("deconv weight {:?} does not fit {ci} -> {co}", weight.shape())));
    }
    let out_dims = geom.transposed_output_dims(in_dims)?;
    let patches = Patches { channels: co, wide: out_dims, narrow: in_dims, geom };
    let (p_in, out_len, rows) = (patches.narrow_len(), patches.wide_len(), patches.rows());
    let mut out = vec![S::zero(); n * co * out_len];
    out.par_chunks_mut(co * out_len).zip(x.data().par_chunks(ci * p_in)).for_each(|(y, xs)| {
        for (c_idx, row) in y.chunks_mut(out_len).enumerate() {
            row.iter_mut().for_each(|v| *v = bias.data()[c_idx]);
        }
        let mut col = Vec::new();
        for (p0, p1) in patches.tiles() {
            let tl = p1 - p0;
            col.resize(rows * tl, S::zero());
            S::gemm(rows, ci, tl, S::one(), weight.data(), 1, rows as isize, &xs[p0..], p_in as isize, 1, S::zero(), &mut col, tl as isize, 1);
            patches.scatter_add(&col, p0, p1, y);
        }
    });
    Tensor::from_vec(&out_shape(n, co, out_dims, true), out)
}

pub fn deconv2d_backward<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, grad_out: &Tensor<S>, geom: ConvGeometry) -> Result<ConvGrads<S>> {
    let (n, ci, in_dims) = spatial(x.shape(), true, "deconv backward")?;
    let co = weight.len() / (ci * geom.taps());
    let out_dims = geom.transposed_output_dims(in_dims)?;
    let patches = Patches { channels: co, wide: out_dims, narrow: in_dims, geom };
    let (p_in, out_len, rows) = (patches.narrow_len(), patches.wide_len(), patches.rows());
    if grad_out.len() != n * co * out_len {
        return Err(Error::Shape(format!("deconv backward: gradient shape {:?}", grad_out.shape())));
    }
    let per_sample: Vec<(Vec<S>, Vec<S>, Vec<S>)> = x
        .data()
        .par_chunks(ci * p_in)
        .zip(grad_out.data().par_chunks(co * out_len))
        .map(|(xs, gy)| {
            let gb: Vec<S> = gy.chunks(out_len).map(|r| r.iter().copied().sum()).collect();
            let mut gw = vec![S::zero(); ci * rows];
            let mut gx = vec![S::zero(); ci * p_in];
            let mut col = Vec::new();
            for (p0, p1) in patches.tiles() {
                let tl = p1 - p0;
                col.resize(rows * tl, S::zero());
                patches.gather(gy, p0, p1, &mut col);
                S::gemm(ci, rows, tl, S::one(), weight.data(), rows as isize, 1, &col, tl as isize, 1, S::zero(), &mut gx[p0..], p_in as isize, 1);
                S::gemm(ci, tl, rows, S::one(), &xs[p0..], p_in as isize, 1, &col, 1, tl as isize, S::one(), &mut gw, rows as isize, 1);
            }
            (gx, gw, gb)
        })
        .collect();
    let mut gx = Vec::with_capacity(x.len());
    for (g, _, _) in &per_sample {
        gx.extend_from_slice(g);
    }
    let gw: Vec<Vec<S>> = per_sample.iter().map(|(_, w, _)| w.clone()).collect();
    let gb: Vec<Vec<S>> = per_sample.iter().map(|(_, _, b)| b.clone()).collect();
    Ok(ConvGrads {
        input: Tensor::from_vec(x.shape(), gx)?,
        weight: sum_partials(&gw, ci * rows),
        bias: sum_partials(&gb, co),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Conv3d,
    Conv2d,
    Deconv2d,
}

/// A convolution layer holding its weights and their gradients.
#[derive(Debug, Clone)]
pub struct Conv<S> {
    pub kind: ConvKind,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub geom: ConvGeometry,
}

impl<S: Scalar> Conv<S> {
    pub fn conv3d(c_in: usize, c_out: usize, geom: ConvGeometry, rng: &mut impl Rng) -> Self {
        let [a, b, c] = geom.kernel;
        let fan_in = c_in * geom.taps();
        Conv {
            kind: ConvKind::Conv3d,
            weight: init::fan_in_uniform(&[c_out, c_in, a, b, c], fan_in, rng),
            bias: init::fan_in_uniform(&[c_out], fan_in, rng),
            geom,
        }
    }

    pub fn conv2d(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let geom = ConvGeometry::planar(kernel, stride, padding);
        let fan_in = c_in * geom.taps();
        Conv {
            kind: ConvKind::Conv2d,
            weight: init::fan_in_uniform(&[c_out, c_in, kernel, kernel], fan_in, rng),
            bias: init::fan_in_uniform(&[c_out], fan_in, rng),
            geom,
        }
    }

    pub fn deconv2d(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let geom = ConvGeometry::planar(kernel, stride, padding);
        let fan_in = c_in * geom.taps();
        Conv {
            kind: ConvKind::Deconv2d,
            weight: init::fan_in_uniform(&[c_in, c_out, kernel, kernel], fan_in, rng),
            bias: init::fan_in_uniform(&[c_out], fan_in, rng),
            geom,
        }
    }

    pub fn c_out(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self.kind {
            ConvKind::Conv3d => conv3d(x, &self.weight, &self.bias, self.geom),
            ConvKind::Conv2d => conv2d(x, &self.weight, &self.bias, self.geom),
            ConvKind::Deconv2d => deconv2d(x, &self.weight, &self.bias, self.geom),
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let g = match self.kind {
            ConvKind::Conv3d => conv3d_backward(x, &self.weight, grad_out, self.geom)?,
            ConvKind::Conv2d => conv2d_backward(x, &self.weight, grad_out, self.geom)?,
            ConvKind::Deconv2d => deconv2d_backward(x, &self.weight, grad_out, self.geom)?,
        };
        self.weight.accumulate_grad(&g.weight);
        self.bias.accumulate_grad(&g.bias);
        Ok(g.input)
    }

    /// Forward pass of a 3D convolution on a sparse input.
    pub fn forward_sparse(&self, x: &SparseVolume<S>) -> Result<Tensor<S>> {
        sparse_conv3d(x, &self.weight, &self.bias, self.geom)
    }

    /// Accumulates parameter gradients and returns the gradient at the occupied sites.
    pub fn backward_sparse(&mut self, x: &SparseVolume<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let g = sparse_conv3d_backward(x, &self.weight, grad_out, self.geom)?;
        self.weight.accumulate_grad(&g.weight);
        self.bias.accumulate_grad(&g.bias);
        Ok(g.input)
    }

    /// Output shape for an input shape, without computing anything.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let planar = self.kind != ConvKind::Conv3d;
        let (n, _, dims) = spatial(input, planar, "conv shape")?;
        let out = match self.kind {
            ConvKind::Deconv2d => self.geom.transposed_output_dims(dims)?,
            _ => self.geom.output_dims(dims)?,
        };
        Ok(out_shape(n, self.c_out(), out, planar))
    }
}

impl<S: Scalar> Parameters<S> for Conv<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        f(&format!("{prefix}.weight"), &mut self.weight, ParamKind::Weight);
        f(&format!("{prefix}.bias"), &mut self.bias, ParamKind::Weight);
    }
}
