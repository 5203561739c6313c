//! Convolutional middle layers, the region proposal network, and the full
//! network from voxel buffers to score and regression maps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBlock, ConvBlockTape, ConvGeometry, Mode, ParamKind, Parameters, Scalar, SparseVolume, Tensor};
use crate::vfe::{FeatureNet, FeatureNetTape};

/// Residuals per anchor.
pub const BOX_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// One logit per anchor, probability `sigmoid(z)`.
    Sigmoid,
    /// Two logits `(neg, pos)` per anchor, probability from a 2-way softmax.
    Softmax2,
}

impl ScoreMode {
    pub fn channels_per_anchor(self) -> usize {
        match self {
            ScoreMode::Sigmoid => 1,
            ScoreMode::Softmax2 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiddleLayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    /// `(s_D, s_H, s_W)`
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl MiddleLayerSpec {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new([self.kernel; 3], self.stride, self.padding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RpnBlockSpec {
    /// Stride of the first convolution.
    pub stride: usize,
    /// Number of stride-1 convolutions after the first.
    pub repeats: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RpnSpec {
    pub blocks: Vec<RpnBlockSpec>,
    /// Output channels of each block's upsampling layer.
    pub up_channels: Vec<usize>,
    pub anchors_per_cell: usize,
    pub score_mode: ScoreMode,
}

impl RpnSpec {
    /// Total downsampling after each block.
    pub fn cumulative_strides(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .scan(1usize, |acc, b| {
                *acc *= b.stride;
                Some(*acc)
            })
            .collect()
    }

    /// Output stride of the score and regression maps (that of block 1).
    pub fn head_stride(&self) -> usize {
        self.blocks.first().map_or(1, |b| b.stride)
    }

    /// Upsampling factor taking each block to the head resolution.
    pub fn upsample_factors(&self) -> Result<Vec<usize>> {
        let head = self.head_stride();
        self.cumulative_strides()
            .into_iter()
            .map(|s| {
                if s % head == 0 {
                    Ok(s / head)
                } else {
                    Err(Error::Config(format!("block stride {s} is not a multiple of the head stride {head}")))
                }
            })
            .collect()
    }

    /// `(kernel, stride, padding)` of the upsampling layer for a factor.
    pub fn upsample_geometry(factor: usize) -> (usize, usize, usize) {
        if factor == 1 {
            (3, 1, 1)
        } else {
            (factor, factor, 0)
        }
    }

    pub fn score_channels(&self) -> usize {
        self.anchors_per_cell * self.score_mode.channels_per_anchor()
    }

    pub fn reg_channels(&self) -> usize {
        self.anchors_per_cell * BOX_DIM
    }

    /// `(H, W)` of the head maps for a BEV input, checking divisibility.
    pub fn head_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let total = self.cumulative_strides().last().copied().unwrap_or(1);
        if !h.is_multiple_of(total) || !w.is_multiple_of(total) {
            return Err(Error::Shape(format!("BEV map {h}x{w} is not divisible by the RPN's total stride {total}")));
        }
        let s = self.head_stride();
        Ok((h / s, w / s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub vfe: Vec<(usize, usize)>,
    pub vfe_out: usize,
    pub middle: Vec<MiddleLayerSpec>,
    pub rpn: RpnSpec,
}

/// Named tensor shapes through the network for one frame, computed from geometry alone.
pub fn shape_chain(spec: &NetworkSpec, grid: [usize; 3]) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = vec![("sparse".to_string(), vec![spec.vfe_out, grid[0], grid[1], grid[2]])];
    let mut dims = grid;
    let mut c = spec.vfe_out;
    for (i, m) in spec.middle.iter().enumerate() {
        if m.c_in != c {
            return Err(Error::Config(format!("middle layer {i} expects {} channels, gets {c}", m.c_in)));
        }
        dims = m.geometry().output_dims(dims)?;
        c = m.c_out;
        out.push((format!("middle.{i}"), vec![c, dims[0], dims[1], dims[2]]));
    }
    let (mut h, mut w) = (dims[1], dims[2]);
    let bev_c = c * dims[0];
    out.push(("bev".into(), vec![bev_c, h, w]));
    let (hh, hw) = spec.rpn.head_dims(h, w)?;
    for (i, b) in spec.rpn.blocks.iter().enumerate() {
        let d = ConvGeometry::planar(3, b.stride, 1).output_dims([1, h, w])?;
        (h, w) = (d[1], d[2]);
        out.push((format!("rpn.block.{i}"), vec![b.channels, h, w]));
    }
    let concat: usize = spec.rpn.up_channels.iter().sum();
    out.push(("rpn.concat".into(), vec![concat, hh, hw]));
    out.push(("score".into(), vec![spec.rpn.score_channels(), hh, hw]));
    out.push(("regression".into(), vec![spec.rpn.reg_channels(), hh, hw]));
    Ok(out)
}

/// `[N, C, D, H, W] -> [N, C*D, H, W]`; element `(c, d, h, w)` lands on channel `c*D + d`.
pub fn reshape_to_bev<S: Scalar>(x: Tensor<S>, depth: usize) -> Result<Tensor<S>> {
    match *x.shape() {
        [n, c, d, h, w] if d == depth => x.reshape(&[n, c * d, h, w]),
        _ => Err(Error::Shape(format!("expected depth {depth} before BEV reshape, got {:?}", x.shape()))),
    }
}

/// Inverse of [`reshape_to_bev`].
pub fn split_from_bev<S: Scalar>(x: Tensor<S>, depth: usize) -> Result<Tensor<S>> {
    match *x.shape() {
        [n, cd, h, w] if depth > 0 && cd % depth == 0 => x.reshape(&[n, cd / depth, depth, h, w]),
        _ => Err(Error::Shape(format!("cannot split {:?} into depth {depth}", x.shape()))),
    }
}

#[derive(Debug, Clone)]
pub struct MiddleLayers<S> {
    pub layers: Vec<ConvBlock<S>>,
}

pub struct MiddleTape<S> {
    layers: Vec<ConvBlockTape<S>>,
}

impl<S: Scalar> MiddleLayers<S> {
    pub fn new(specs: &[MiddleLayerSpec], rng: &mut impl Rng) -> Self {
        let layers = specs.iter().map(|m| ConvBlock::new(Conv::conv3d(m.c_in, m.c_out, m.geometry(), rng))).collect();
        MiddleLayers { layers }
    }

    pub fn forward(&mut self, x: Tensor<S>, mode: Mode) -> Result<(Tensor<S>, MiddleTape<S>)> {
        let mut cur = x;
        let mut tapes = Vec::with_capacity(self.layers.len());
        for l in &mut self.layers {
            let (y, t) = l.forward(cur, mode)?;
            tapes.push(t);
            cur = y;
        }
        Ok((cur, MiddleTape { layers: tapes }))
    }

    /// Forward from one sparse volume per frame; the first layer skips empty sites.
    pub fn forward_sparse(&mut self, xs: Vec<SparseVolume<S>>, mode: Mode) -> Result<(Tensor<S>, MiddleTape<S>)> {
        let (first, rest) = self.layers.split_first_mut().ok_or_else(|| Error::Config("no middle layers".into()))?;
        let (mut cur, t) = first.forward_sparse(xs, mode)?;
        let mut tapes = vec![t];
        for l in rest {
            let (y, t) = l.forward(cur, mode)?;
            tapes.push(t);
            cur = y;
        }
        Ok((cur, MiddleTape { layers: tapes }))
    }

    /// Input gradient: dense for `forward`, `[K_total, C]` site gradients for `forward_sparse`.
    pub fn backward(&mut self, tape: &MiddleTape<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = grad_out.clone();
        for (l, t) in self.layers.iter_mut().zip(&tape.layers).rev() {
            g = l.backward(t, &g)?;
        }
        Ok(g)
    }
}

impl<S: Scalar> Parameters<S> for MiddleLayers<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        self.layers.visit(prefix, f);
    }
}

#[derive(Debug, Clone)]
pub struct Rpn<S> {
    pub spec: RpnSpec,
    pub blocks: Vec<Vec<ConvBlock<S>>>,
    pub upsample: Vec<ConvBlock<S>>,
    /// 1x1 convolutions without activation.
    pub score_head: Conv<S>,
    pub reg_head: Conv<S>,
}

pub struct RpnTape<S> {
    blocks: Vec<Vec<ConvBlockTape<S>>>,
    upsample: Vec<ConvBlockTape<S>>,
    concat: Tensor<S>,
}

impl<S: Scalar> Rpn<S> {
    pub fn new(c_in: usize, spec: &RpnSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.blocks.is_empty() || spec.up_channels.len() != spec.blocks.len() {
            return Err(Error::Config("the RPN needs one upsampling width per block".into()));
        }
        let factors = spec.upsample_factors()?;
        let mut blocks = Vec::new();
        let mut upsample = Vec::new();
        let mut ch = c_in;
        for (b, (&f, &up)) in spec.blocks.iter().zip(factors.iter().zip(&spec.up_channels)) {
            let mut convs = vec![ConvBlock::new(Conv::conv2d(ch, b.channels, 3, b.stride, 1, rng))];
            for _ in 0..b.repeats {
                convs.push(ConvBlock::new(Conv::conv2d(b.channels, b.channels, 3, 1, 1, rng)));
            }
            blocks.push(convs);
            let (k, s, p) = RpnSpec::upsample_geometry(f);
            upsample.push(ConvBlock::new(Conv::deconv2d(b.channels, up, k, s, p, rng)));
            ch = b.channels;
        }
        let concat: usize = spec.up_channels.iter().sum();
        Ok(Rpn {
            spec: spec.clone(),
            blocks,
            upsample,
            score_head: Conv::conv2d(concat, spec.score_channels(), 1, 1, 0, rng),
            reg_head: Conv::conv2d(concat, spec.reg_channels(), 1, 1, 0, rng),
        })
    }

    /// `[N, C, H, W]` to `(score [N, A*s, H/s1, W/s1], regression [N, 7A, H/s1, W/s1])`.
    pub fn forward(&mut self, x: Tensor<S>, mode: Mode) -> Result<(Tensor<S>, Tensor<S>, RpnTape<S>)> {
        self.spec.head_dims(x.dim(2), x.dim(3))?;
        let mut cur = x;
        let mut block_tapes = Vec::new();
        let mut up_tapes = Vec::new();
        let mut ups = Vec::new();
        for (convs, up) in self.blocks.iter_mut().zip(&mut self.upsample) {
            let mut tapes = Vec::new();
            for c in convs.iter_mut() {
                let (y, t) = c.forward(cur, mode)?;
                tapes.push(t);
                cur = y;
            }
            block_tapes.push(tapes);
            let (u, t) = up.forward(cur.clone(), mode)?;
            up_tapes.push(t);
            ups.push(u);
        }
        let concat = concat_channels(&ups)?;
        let score = self.score_head.forward(&concat)?;
        let reg = self.reg_head.forward(&concat)?;
        Ok((score, reg, RpnTape { blocks: block_tapes, upsample: up_tapes, concat }))
    }

    pub fn backward(&mut self, tape: &RpnTape<S>, g_score: &Tensor<S>, g_reg: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g_concat = self.score_head.backward(&tape.concat, g_score)?;
        let g2 = self.reg_head.backward(&tape.concat, g_reg)?;
        for (a, b) in g_concat.data_mut().iter_mut().zip(g2.data()) {
            *a += *b;
        }
        let g_ups = split_channels(&g_concat, &self.spec.up_channels)?;
        let mut carry: Option<Tensor<S>> = None;
        for i in (0..self.blocks.len()).rev() {
            let mut g = self.upsample[i].backward(&tape.upsample[i], &g_ups[i])?;
            if let Some(c) = carry.take() {
                for (a, b) in g.data_mut().iter_mut().zip(c.data()) {
                    *a += *b;
                }
            }
            for (conv, t) in self.blocks[i].iter_mut().zip(&tape.blocks[i]).rev() {
                g = conv.backward(t, &g)?;
            }
            carry = Some(g);
        }
        Ok(carry.expect("at least one block"))
    }
}

impl<S: Scalar> Parameters<S> for Rpn<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        self.blocks.visit(&format!("{prefix}.block"), f);
        self.upsample.visit(&format!("{prefix}.up"), f);
        self.score_head.visit(&format!("{prefix}.score"), f);
        self.reg_head.visit(&format!("{prefix}.reg"), f);
    }
}

/// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
pub fn concat_channels<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
    let (n, h, w) = (first.dim(0), first.dim(2), first.dim(3));
    let mut total = 0;
    for p in parts {
        if p.shape().len() != 4 || p.dim(0) != n || p.dim(2) != h || p.dim(3) != w {
            return Err(Error::Shape(format!("cannot concatenate {:?} with {:?}", p.shape(), first.shape())));
        }
        total += p.dim(1);
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for s in 0..n {
        for p in parts {
            let c = p.dim(1);
            data.extend_from_slice(&p.data()[s * c * plane..(s + 1) * c * plane]);
        }
    }
    Tensor::from_vec(&[n, total, h, w], data)
}

pub fn split_channels<S: Scalar>(x: &Tensor<S>, sizes: &[usize]) -> Result<Vec<Tensor<S>>> {
    let &[n, total, h, w] = x.shape() else {
        return Err(Error::Shape(format!("split expects [N, C, H, W], got {:?}", x.shape())));
    };
    if sizes.iter().sum::<usize>() != total {
        return Err(Error::Shape(format!("channel split {sizes:?} does not sum to {total}")));
    }
    let plane = h * w;
    let mut out: Vec<Vec<S>> = sizes.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
    for s in 0..n {
        let mut at = s * total * plane;
        for (buf, &c) in out.iter_mut().zip(sizes) {
            buf.extend_from_slice(&x.data()[at..at + c * plane]);
            at += c * plane;
        }
    }
    out.into_iter().zip(sizes).map(|(d, &c)| Tensor::from_vec(&[n, c, h, w], d)).collect()
}

/// Voxelized frame as the network consumes it.
#[derive(Debug, Clone)]
pub struct FrameInput<S> {
    /// `[K, T, 7]`, centroid offsets filled in.
    pub features: Tensor<S>,
    pub counts: Vec<usize>,
    pub coords: Vec<[usize; 3]>,
}

impl<S: Scalar> FrameInput<S> {
    pub fn from_buffers(b: &crate::voxel::VoxelBuffers) -> Self {
        FrameInput { features: b.feature_tensor(), counts: b.counts.clone(), coords: b.coords.clone() }
    }
}

/// Score and regression maps for a batch of frames.
#[derive(Debug, Clone)]
pub struct NetOutput<S> {
    /// `[N, A*s, Hh, Wh]`
    pub score: Tensor<S>,
    /// `[N, 7A, Hh, Wh]`
    pub reg: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct VoxelNet<S> {
    pub spec: NetworkSpec,
    pub grid: [usize; 3],
    pub features: FeatureNet<S>,
    pub middle: MiddleLayers<S>,
    pub rpn: Rpn<S>,
}

pub struct VoxelNetTape<S> {
    features: FeatureNetTape<S>,
    counts: Vec<usize>,
    middle: MiddleTape<S>,
    depth: usize,
    rpn: RpnTape<S>,
}

impl<S: Scalar> VoxelNet<S> {
    pub fn new(spec: &NetworkSpec, grid: [usize; 3], rng: &mut impl Rng) -> Result<Self> {
        let chain = shape_chain(spec, grid)?;
        let bev = &chain.iter().find(|(n, _)| n == "bev").expect("chain has a bev entry").1;
        Ok(VoxelNet {
            spec: spec.clone(),
            grid,
            features: FeatureNet::new(&spec.vfe, spec.vfe_out, rng)?,
            middle: MiddleLayers::new(&spec.middle, rng),
            rpn: Rpn::new(bev[0], &spec.rpn, rng)?,
        })
    }

    /// Sets the running-statistics momentum of every batch norm.
    pub fn set_bn_momentum(&mut self, momentum: f64) {
        let f = &mut self.features;
        let fcn_bns = f.layers.iter_mut().map(|l| &mut l.fcn.bn).chain(std::iter::once(&mut f.head.bn));
        let conv_bns = self
            .middle
            .layers
            .iter_mut()
            .chain(self.rpn.blocks.iter_mut().flatten())
            .chain(self.rpn.upsample.iter_mut())
            .map(|b| &mut b.bn);
        for bn in fcn_bns.chain(conv_bns) {
            bn.momentum = momentum;
        }
    }

    /// `(Hh, Wh)` of the output maps.
    pub fn head_dims(&self) -> Result<(usize, usize)> {
        let chain = shape_chain(&self.spec, self.grid)?;
        let s = &chain.iter().find(|(n, _)| n == "score").expect("chain has a score entry").1;
        Ok((s[1], s[2]))
    }

    pub fn forward(&mut self, frames: &[FrameInput<S>], mode: Mode) -> Result<(NetOutput<S>, VoxelNetTape<S>)> {
        if frames.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        // all voxels of the batch share one VFE pass so BN sees the whole batch
        let t = frames[0].features.dim(1);
        let mut data = Vec::new();
        let mut counts = Vec::new();
        for f in frames {
            if f.features.shape().len() != 3 || f.features.dim(1) != t {
                return Err(Error::Shape("frames in a batch must share T".into()));
            }
            data.extend_from_slice(f.features.data());
            counts.extend_from_slice(&f.counts);
        }
        let k_total = counts.len();
        let x = Tensor::from_vec(&[k_total, t, crate::voxel::FEATURE_DIM], data)?;
        let (vf, ftape) = self.features.forward(x, &counts, mode)?;
        let c = vf.dim(1);
        let mut volumes = Vec::with_capacity(frames.len());
        let mut start = 0;
        for f in frames {
            let k = f.counts.len();
            let part = Tensor::from_vec(&[k, c], vf.data()[start * c..(start + k) * c].to_vec())?;
            volumes.push(SparseVolume { features: part, coords: f.coords.clone(), grid: self.grid });
            start += k;
        }
        let (mid, mtape) = self.middle.forward_sparse(volumes, mode)?;
        let depth = mid.dim(2);
        let bev = reshape_to_bev(mid, depth)?;
        let (score, reg, rtape) = self.rpn.forward(bev, mode)?;
        let tape = VoxelNetTape { features: ftape, counts, middle: mtape, depth, rpn: rtape };
        Ok((NetOutput { score, reg }, tape))
    }

    /// Accumulates parameter gradients from gradients of the two output maps.
    pub fn backward(&mut self, tape: &VoxelNetTape<S>, g_score: &Tensor<S>, g_reg: &Tensor<S>) -> Result<()> {
        let g_bev = self.rpn.backward(&tape.rpn, g_score, g_reg)?;
        let g_mid = split_from_bev(g_bev, tape.depth)?;
        let g_vf = self.middle.backward(&tape.middle, &g_mid)?;
        self.features.backward(&tape.features, &tape.counts, &g_vf)?;
        Ok(())
    }
}

impl<S: Scalar> Parameters<S> for VoxelNet<S> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>, ParamKind)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.features.visit(&p("features"), f);
        self.middle.visit(&p("middle"), f);
        self.rpn.visit(&p("rpn"), f);
    }
}
