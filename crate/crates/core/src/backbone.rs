//! Convolutional feature extractor: 7×7/2 stem with 3×3/2 max-pool, a short
//! stack of stride-1 bottleneck blocks and a 1×1 projection to the token
//! dimension. Overall stride is 4.
//!
//! Every function here works on a batch (`&[Tensor]`, each `C×H×W`) because
//! batch-statistics normalization couples the images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::he_fan_out;
use crate::kinks;
use crate::mode::Mode;
use crate::ops::{matmul, matmul_nt, matmul_tn};
use crate::params::{join, ParamKind, Params};
use crate::scalar::{c, Real};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Spatial downsampling from image to feature map.
pub const STRIDE: usize = 4;

/// Channel normalization flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Batch statistics while training, running averages at evaluation.
    Batch,
    /// Plain per-channel scale and shift.
    Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub bottleneck_width: usize,
    pub block_channels: usize,
    pub blocks: usize,
    pub norm: NormKind,
}

impl BackboneConfig {
    /// Stem and first two stage-1 blocks of a ResNet-50.
    pub fn resnet_stage1() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 64,
            bottleneck_width: 64,
            block_channels: 256,
            blocks: 2,
            norm: NormKind::Batch,
        }
    }

    /// Reduced widths with affine normalization, for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 8,
            bottleneck_width: 4,
            block_channels: 16,
            blocks: 2,
            norm: NormKind::Affine,
        }
    }

    pub fn is_toy(&self) -> bool {
        self.norm == NormKind::Affine
    }

    pub fn validate(&self) -> Result<()> {
        if [
            self.in_channels,
            self.stem_channels,
            self.bottleneck_width,
            self.block_channels,
        ]
        .contains(&0)
        {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// convolution

/// Output size of a convolution or pooling window along one axis.
pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || size + 2 * padding < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} (stride {stride}, padding {padding}) does not fit size {size}"
        )));
    }
    Ok((size + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    /// `[out, in, k, k]`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T = f32> {
    cols: Vec<Tensor<T>>,
    in_shape: [usize; 3],
}

fn im2col<T: Real>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<(Tensor<T>, usize, usize)> {
    let (cin, h, w) = x.dims3()?;
    let (ho, wo) = (conv_out(h, k, stride, pad)?, conv_out(w, k, stride, pad)?);
    let mut cols = vec![T::zero(); cin * k * k * ho * wo];
    let xd = x.data();
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xd[ci * h * w + iy as usize * w..ci * h * w + (iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_op("im2col", &[cin * k * k, ho * wo], cols), ho, wo))
}

fn col2im<T: Real>(cols: &Tensor<T>, in_shape: [usize; 3], k: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let [cin, h, w] = in_shape;
    let (ho, wo) = (conv_out(h, k, stride, pad)?, conv_out(w, k, stride, pad)?);
    let mut out = vec![T::zero(); cin * h * w];
    let cd = cols.data();
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cd[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let idx = ci * h * w + iy as usize * w + ix as usize;
                            out[idx] = out[idx] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_op("col2im", &in_shape, out))
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, k, k]),
            bias: bias.then(|| Tensor::zeros(&[cout])),
            stride,
            padding,
        }
    }

    pub fn init<R: Rng>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: he_fan_out(&[cout, cin, k, k], rng),
            bias: bias.then(|| Tensor::zeros(&[cout])),
            stride,
            padding,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn weight_2d(&self) -> Tensor<T> {
        let s = self.weight.shape();
        Tensor::from_op("conv_weight", &[s[0], s[1] * s[2] * s[3]], self.weight.data().to_vec())
    }

    /// Cross-correlation of one image.
    pub fn forward_one(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (cin, _, _) = x.dims3()?;
        if cin != self.in_channels() {
            return Err(Error::shape("conv2d", x.shape(), self.weight.shape()));
        }
        let (cols, ho, wo) = im2col(x, self.kernel(), self.stride, self.padding)?;
        let mut y = matmul(&self.weight_2d(), &cols)?;
        if let Some(b) = &self.bias {
            y = crate::ops::add_row_bias(&y, b)?;
        }
        Ok((y.reshape(&[self.out_channels(), ho, wo])?, cols))
    }

    pub fn forward(&self, xs: &[Tensor<T>]) -> Result<(Vec<Tensor<T>>, ConvCache<T>)> {
        let mut outs = Vec::with_capacity(xs.len());
        let mut cols = Vec::with_capacity(xs.len());
        for x in xs {
            let (y, col) = self.forward_one(x)?;
            outs.push(y);
            cols.push(col);
        }
        let in_shape = match xs.first() {
            Some(x) => {
                let (a, b, c) = x.dims3()?;
                [a, b, c]
            }
            None => [self.in_channels(), 0, 0],
        };
        Ok((outs, ConvCache { cols, in_shape }))
    }

    /// Accumulates weight/bias gradients; returns input gradients.
    pub fn backward(&mut self, cache: &ConvCache<T>, upstream: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let w2 = self.weight_2d();
        let mut dw = Tensor::zeros(w2.shape());
        let mut db = Tensor::zeros(&[self.out_channels()]);
        let mut dxs = Vec::with_capacity(upstream.len());
        for (g, cols) in upstream.iter().zip(&cache.cols) {
            let (co, ho, wo) = g.dims3()?;
            let g2 = Tensor::from_op("conv_grad", &[co, ho * wo], g.data().to_vec());
            dw.add_assign(&matmul_nt(&g2, cols)?)?;
            if self.bias.is_some() {
                db.add_assign(&crate::ops::row_sums(&g2, &[co])?)?;
            }
            let dcols = matmul_tn(&w2, &g2)?;
            dxs.push(col2im(
                &dcols,
                cache.in_shape,
                self.kernel(),
                self.stride,
                self.padding,
            )?);
        }
        self.weight.accumulate_grad(&dw.reshape(self.weight.shape())?)?;
        if let Some(b) = &mut self.bias {
            b.accumulate_grad(&db)?;
        }
        Ok(dxs)
    }
}

impl<T: Real> Params<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Bias);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Bias);
        }
    }
}

// ---------------------------------------------------------------------------
// channel normalization

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm<T = f32> {
    pub kind: NormKind,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Debug)]
pub enum NormCache<T = f32> {
    /// Per-channel scale applied to the input (affine or frozen statistics).
    Fixed { inputs_hat: Vec<Tensor<T>>, scale: Vec<T> },
    /// Batch statistics: normalized activations and `1/σ` per channel.
    Batch {
        normalized: Vec<Tensor<T>>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var_unbiased: Vec<T>,
    },
}

impl<T: Real> ChannelNorm<T> {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        Self {
            kind,
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn forward(&self, xs: &[Tensor<T>], mode: &Mode<'_>) -> Result<(Vec<Tensor<T>>, NormCache<T>)> {
        let ch = self.gamma.len();
        let first = xs.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (xc, h, w) = first.dims3()?;
        if xc != ch {
            return Err(Error::shape("channel_norm", first.shape(), self.gamma.shape()));
        }
        let plane = h * w;
        let use_batch = self.kind == NormKind::Batch && mode.is_train();
        let (shift, scale, cache_stats) = if use_batch {
            let m = (xs.len() * plane) as f64;
            let mut mean = vec![T::zero(); ch];
            let mut var = vec![T::zero(); ch];
            for cc in 0..ch {
                let s: T = xs
                    .iter()
                    .map(|x| x.data()[cc * plane..(cc + 1) * plane].iter().copied().sum::<T>())
                    .sum();
                let mu = s / c(m);
                let v: T = xs
                    .iter()
                    .map(|x| {
                        x.data()[cc * plane..(cc + 1) * plane]
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .sum::<T>()
                    })
                    .sum::<T>()
                    / c(m);
                mean[cc] = mu;
                var[cc] = v;
            }
            let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + c(BN_EPS)).sqrt()).collect();
            let unbiased = var
                .iter()
                .map(|&v| if m > 1.0 { v * c(m / (m - 1.0)) } else { v })
                .collect();
            (mean.clone(), inv.clone(), Some((inv, mean, unbiased)))
        } else {
            match self.kind {
                NormKind::Affine => (vec![T::zero(); ch], vec![T::one(); ch], None),
                NormKind::Batch => (
                    self.running_mean.data().to_vec(),
                    self.running_var
                        .data()
                        .iter()
                        .map(|&v| T::one() / (v + c(BN_EPS)).sqrt())
                        .collect(),
                    None,
                ),
            }
        };
        let mut outs = Vec::with_capacity(xs.len());
        let mut hats = Vec::with_capacity(xs.len());
        for x in xs {
            if x.shape() != first.shape() {
                return Err(Error::shape("channel_norm", first.shape(), x.shape()));
            }
            let mut hat = x.data().to_vec();
            let mut y = vec![T::zero(); hat.len()];
            for cc in 0..ch {
                let (g, b) = (self.gamma.data()[cc], self.beta.data()[cc]);
                for k in cc * plane..(cc + 1) * plane {
                    hat[k] = (hat[k] - shift[cc]) * scale[cc];
                    y[k] = g * hat[k] + b;
                }
            }
            outs.push(Tensor::from_op("channel_norm", x.shape(), y));
            hats.push(Tensor::from_op("channel_norm", x.shape(), hat));
        }
        let cache = match cache_stats {
            Some((inv_std, mean, var_unbiased)) => NormCache::Batch {
                normalized: hats,
                inv_std,
                mean,
                var_unbiased,
            },
            None => NormCache::Fixed {
                inputs_hat: hats,
                scale,
            },
        };
        Ok((outs, cache))
    }

    pub fn backward(&mut self, cache: &NormCache<T>, upstream: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let ch = self.gamma.len();
        let hats = match cache {
            NormCache::Fixed { inputs_hat, .. } => inputs_hat,
            NormCache::Batch { normalized, .. } => normalized,
        };
        let plane = upstream.first().map_or(0, |g| g.len() / ch);
        let mut dgamma = vec![T::zero(); ch];
        let mut dbeta = vec![T::zero(); ch];
        for (g, hat) in upstream.iter().zip(hats) {
            for cc in 0..ch {
                for k in cc * plane..(cc + 1) * plane {
                    dgamma[cc] = dgamma[cc] + g.data()[k] * hat.data()[k];
                    dbeta[cc] = dbeta[cc] + g.data()[k];
                }
            }
        }
        let dxs = match cache {
            NormCache::Fixed { scale, .. } => upstream
                .iter()
                .map(|g| {
                    let mut d = g.data().to_vec();
                    for cc in 0..ch {
                        let s = self.gamma.data()[cc] * scale[cc];
                        d[cc * plane..(cc + 1) * plane].iter_mut().for_each(|v| *v = *v * s);
                    }
                    Tensor::from_op("channel_norm_backward", g.shape(), d)
                })
                .collect(),
            NormCache::Batch {
                normalized, inv_std, ..
            } => {
                let m = c::<T>((upstream.len() * plane) as f64);
                upstream
                    .iter()
                    .zip(normalized)
                    .map(|(g, hat)| {
                        let mut d = vec![T::zero(); g.len()];
                        for cc in 0..ch {
                            let k0 = self.gamma.data()[cc] * inv_std[cc] / m;
                            let r = cc * plane..(cc + 1) * plane;
                            let terms = g.data()[r.clone()].iter().zip(&hat.data()[r.clone()]);
                            for (dk, (&gk, &hk)) in d[r].iter_mut().zip(terms) {
                                *dk = k0 * (m * gk - dbeta[cc] - hk * dgamma[cc]);
                            }
                        }
                        Tensor::from_op("channel_norm_backward", g.shape(), d)
                    })
                    .collect()
            }
        };
        self.gamma
            .accumulate_grad(&Tensor::from_op("channel_norm_backward", &[ch], dgamma))?;
        self.beta
            .accumulate_grad(&Tensor::from_op("channel_norm_backward", &[ch], dbeta))?;
        Ok(dxs)
    }

    /// Folds batch statistics into the running averages.
    pub fn commit(&mut self, cache: &NormCache<T>) {
        if let NormCache::Batch { mean, var_unbiased, .. } = cache {
            let mom = c::<T>(BN_MOMENTUM);
            for (r, &m) in self.running_mean.data_mut().iter_mut().zip(mean) {
                *r = (T::one() - mom) * *r + mom * m;
            }
            for (r, &v) in self.running_var.data_mut().iter_mut().zip(var_unbiased) {
                *r = (T::one() - mom) * *r + mom * v;
            }
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if self.kind == NormKind::Batch {
            f(&join(prefix, "running_mean"), &self.running_mean);
            f(&join(prefix, "running_var"), &self.running_var);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if self.kind == NormKind::Batch {
            f(&join(prefix, "running_mean"), &mut self.running_mean);
            f(&join(prefix, "running_var"), &mut self.running_var);
        }
    }
}

impl<T: Real> Params<T> for ChannelNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Norm);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Norm);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Norm);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Norm);
    }
}

// ---------------------------------------------------------------------------
// activations and pooling

pub fn relu<T: Real>(xs: &[Tensor<T>]) -> Vec<Tensor<T>> {
    if kinks::active() {
        for x in xs {
            kinks::record(x.data().iter().map(|&v| u64::from(v > T::zero())));
        }
    }
    xs.iter().map(|x| x.map(|v| v.max(T::zero()))).collect()
}

/// Adjoint of [`relu`] given its outputs.
pub fn relu_backward<T: Real>(outputs: &[Tensor<T>], upstream: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    outputs
        .iter()
        .zip(upstream)
        .map(|(y, g)| g.zip_map(y, "relu_backward", |g, y| if y > T::zero() { g } else { T::zero() }))
        .collect()
}

pub const POOL_KERNEL: usize = 3;
pub const POOL_STRIDE: usize = 2;
pub const POOL_PADDING: usize = 1;

#[derive(Clone, Debug)]
pub struct PoolCache {
    argmax: Vec<Vec<usize>>,
    in_shape: [usize; 3],
}

/// 3×3 stride-2 max-pool with padding 1 (padding never wins).
pub fn max_pool<T: Real>(xs: &[Tensor<T>]) -> Result<(Vec<Tensor<T>>, PoolCache)> {
    let mut outs = Vec::with_capacity(xs.len());
    let mut argmax = Vec::with_capacity(xs.len());
    let mut in_shape = [0; 3];
    for x in xs {
        let (ch, h, w) = x.dims3()?;
        in_shape = [ch, h, w];
        let ho = conv_out(h, POOL_KERNEL, POOL_STRIDE, POOL_PADDING)?;
        let wo = conv_out(w, POOL_KERNEL, POOL_STRIDE, POOL_PADDING)?;
        let mut out = vec![T::zero(); ch * ho * wo];
        let mut arg = vec![0usize; ch * ho * wo];
        for cc in 0..ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for ky in 0..POOL_KERNEL {
                        let iy = (oy * POOL_STRIDE + ky) as isize - POOL_PADDING as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..POOL_KERNEL {
                            let ix = (ox * POOL_STRIDE + kx) as isize - POOL_PADDING as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = cc * h * w + iy as usize * w + ix as usize;
                            if x.data()[idx] > best {
                                best = x.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (cc * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
        kinks::record(arg.iter().map(|&i| i as u64));
        outs.push(Tensor::from_op("max_pool", &[ch, ho, wo], out));
        argmax.push(arg);
    }
    Ok((outs, PoolCache { argmax, in_shape }))
}

pub fn max_pool_backward<T: Real>(cache: &PoolCache, upstream: &[Tensor<T>]) -> Vec<Tensor<T>> {
    upstream
        .iter()
        .zip(&cache.argmax)
        .map(|(g, arg)| {
            let mut d = vec![T::zero(); cache.in_shape.iter().product()];
            for (&gv, &i) in g.data().iter().zip(arg) {
                d[i] = d[i] + gv;
            }
            Tensor::from_op("max_pool_backward", &cache.in_shape, d)
        })
        .collect()
}

fn add_batch<T: Real>(a: &[Tensor<T>], b: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    a.iter().zip(b).map(|(x, y)| x.add(y)).collect()
}

// ---------------------------------------------------------------------------
// bottleneck residual block

#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck<T = f32> {
    pub conv1: Conv2d<T>,
    pub norm1: ChannelNorm<T>,
    pub conv2: Conv2d<T>,
    pub norm2: ChannelNorm<T>,
    pub conv3: Conv2d<T>,
    pub norm3: ChannelNorm<T>,
    /// 1×1 projection when input and output widths differ.
    pub shortcut: Option<(Conv2d<T>, ChannelNorm<T>)>,
}

#[derive(Clone, Debug)]
pub struct BottleneckCache<T = f32> {
    c1: ConvCache<T>,
    n1: NormCache<T>,
    a1: Vec<Tensor<T>>,
    c2: ConvCache<T>,
    n2: NormCache<T>,
    a2: Vec<Tensor<T>>,
    c3: ConvCache<T>,
    n3: NormCache<T>,
    short: Option<(ConvCache<T>, NormCache<T>)>,
    out: Vec<Tensor<T>>,
}

impl<T: Real> Bottleneck<T> {
    pub fn new<R: Rng>(cin: usize, width: usize, cout: usize, norm: NormKind, rng: Option<&mut R>) -> Self {
        let make = |ci, co, k, pad| -> Conv2d<T> { Conv2d::zeros(ci, co, k, 1, pad, false) };
        let mut block = Self {
            conv1: make(cin, width, 1, 0),
            norm1: ChannelNorm::new(norm, width),
            conv2: make(width, width, 3, 1),
            norm2: ChannelNorm::new(norm, width),
            conv3: make(width, cout, 1, 0),
            norm3: ChannelNorm::new(norm, cout),
            shortcut: (cin != cout).then(|| (make(cin, cout, 1, 0), ChannelNorm::new(norm, cout))),
        };
        if let Some(rng) = rng {
            block.conv1.weight = he_fan_out(block.conv1.weight.shape(), rng);
            block.conv2.weight = he_fan_out(block.conv2.weight.shape(), rng);
            block.conv3.weight = he_fan_out(block.conv3.weight.shape(), rng);
            if let Some((conv, _)) = &mut block.shortcut {
                conv.weight = he_fan_out(conv.weight.shape(), rng);
            }
        }
        block
    }

    pub fn forward(&self, xs: &[Tensor<T>], mode: &Mode<'_>) -> Result<(Vec<Tensor<T>>, BottleneckCache<T>)> {
        let (h, c1) = self.conv1.forward(xs)?;
        let (h, n1) = self.norm1.forward(&h, mode)?;
        let a1 = relu(&h);
        let (h, c2) = self.conv2.forward(&a1)?;
        let (h, n2) = self.norm2.forward(&h, mode)?;
        let a2 = relu(&h);
        let (h, c3) = self.conv3.forward(&a2)?;
        let (branch, n3) = self.norm3.forward(&h, mode)?;
        let (skip, short) = match &self.shortcut {
            Some((conv, norm)) => {
                let (s, sc) = conv.forward(xs)?;
                let (s, sn) = norm.forward(&s, mode)?;
                (s, Some((sc, sn)))
            }
            None => (xs.to_vec(), None),
        };
        let out = relu(&add_batch(&branch, &skip)?);
        Ok((
            out.clone(),
            BottleneckCache {
                c1,
                n1,
                a1,
                c2,
                n2,
                a2,
                c3,
                n3,
                short,
                out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BottleneckCache<T>, upstream: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let g = relu_backward(&cache.out, upstream)?;
        let gb = self.norm3.backward(&cache.n3, &g)?;
        let gb = self.conv3.backward(&cache.c3, &gb)?;
        let gb = relu_backward(&cache.a2, &gb)?;
        let gb = self.norm2.backward(&cache.n2, &gb)?;
        let gb = self.conv2.backward(&cache.c2, &gb)?;
        let gb = relu_backward(&cache.a1, &gb)?;
        let gb = self.norm1.backward(&cache.n1, &gb)?;
        let gb = self.conv1.backward(&cache.c1, &gb)?;
        let gs = match (&mut self.shortcut, &cache.short) {
            (Some((conv, norm)), Some((sc, sn))) => {
                let gs = norm.backward(sn, &g)?;
                conv.backward(sc, &gs)?
            }
            _ => g,
        };
        add_batch(&gb, &gs)
    }

    pub fn commit(&mut self, cache: &BottleneckCache<T>) {
        self.norm1.commit(&cache.n1);
        self.norm2.commit(&cache.n2);
        self.norm3.commit(&cache.n3);
        if let (Some((_, norm)), Some((_, sn))) = (&mut self.shortcut, &cache.short) {
            norm.commit(sn);
        }
    }

    fn norms(&self) -> Vec<(&'static str, &ChannelNorm<T>)> {
        let mut v = vec![("norm1", &self.norm1), ("norm2", &self.norm2), ("norm3", &self.norm3)];
        if let Some((_, n)) = &self.shortcut {
            v.push(("shortcut.norm", n));
        }
        v
    }
}

impl<T: Real> Params<T> for Bottleneck<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.norm3.visit(&join(prefix, "norm3"), f);
        if let Some((conv, norm)) = &self.shortcut {
            conv.visit(&join(prefix, "shortcut.conv"), f);
            norm.visit(&join(prefix, "shortcut.norm"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.norm3.visit_mut(&join(prefix, "norm3"), f);
        if let Some((conv, norm)) = &mut self.shortcut {
            conv.visit_mut(&join(prefix, "shortcut.conv"), f);
            norm.visit_mut(&join(prefix, "shortcut.norm"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// full extractor

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T = f32> {
    pub config: BackboneConfig,
    pub stem_conv: Conv2d<T>,
    pub stem_norm: ChannelNorm<T>,
    pub blocks: Vec<Bottleneck<T>>,
    /// 1×1 projection from the block width to the token dimension.
    pub proj: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache<T = f32> {
    stem_conv: ConvCache<T>,
    stem_norm: NormCache<T>,
    stem_act: Vec<Tensor<T>>,
    pool: PoolCache,
    blocks: Vec<BottleneckCache<T>>,
    proj: ConvCache<T>,
}

impl<T: Real> Backbone<T> {
    fn build<R: Rng>(config: &BackboneConfig, dim: usize, mut rng: Option<&mut R>) -> Result<Self> {
        config.validate()?;
        let norm = config.norm;
        let mut stem_conv = Conv2d::zeros(config.in_channels, config.stem_channels, 7, 2, 3, false);
        if let Some(r) = rng.as_deref_mut() {
            stem_conv.weight = he_fan_out(stem_conv.weight.shape(), r);
        }
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut cin = config.stem_channels;
        for _ in 0..config.blocks {
            blocks.push(Bottleneck::new(
                cin,
                config.bottleneck_width,
                config.block_channels,
                norm,
                rng.as_deref_mut(),
            ));
            cin = config.block_channels;
        }
        let mut proj = Conv2d::zeros(cin, dim, 1, 1, 0, true);
        if let Some(r) = rng {
            proj.weight = he_fan_out(proj.weight.shape(), r);
        }
        Ok(Self {
            config: config.clone(),
            stem_conv,
            stem_norm: ChannelNorm::new(norm, config.stem_channels),
            blocks,
            proj,
        })
    }

    pub fn init<R: Rng>(config: &BackboneConfig, dim: usize, rng: &mut R) -> Result<Self> {
        Self::build(config, dim, Some(rng))
    }

    pub fn zeros(config: &BackboneConfig, dim: usize) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(config, dim, None)
    }

    pub fn out_channels(&self) -> usize {
        self.proj.out_channels()
    }

    /// Feature map size for an `h×w` image.
    pub fn feature_size(h: usize, w: usize) -> Result<(usize, usize)> {
        if !h.is_multiple_of(STRIDE) || !w.is_multiple_of(STRIDE) || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} is not divisible by {STRIDE}"
            )));
        }
        Ok((h / STRIDE, w / STRIDE))
    }

    /// Dense feature maps `C×(H/4)×(W/4)` for a batch of images.
    pub fn forward(&self, images: &[Tensor<T>], mode: &Mode<'_>) -> Result<(Vec<Tensor<T>>, BackboneCache<T>)> {
        for img in images {
            let (cin, h, w) = img.dims3()?;
            if cin != self.config.in_channels {
                return Err(Error::shape(
                    "extract_features",
                    img.shape(),
                    self.stem_conv.weight.shape(),
                ));
            }
            Self::feature_size(h, w)?;
        }
        let (x, stem_conv) = self.stem_conv.forward(images)?;
        let (x, stem_norm) = self.stem_norm.forward(&x, mode)?;
        let stem_act = relu(&x);
        let (mut x, pool) = max_pool(&stem_act)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(&x, mode)?;
            blocks.push(cache);
            x = y;
        }
        let (features, proj) = self.proj.forward(&x)?;
        Ok((
            features,
            BackboneCache {
                stem_conv,
                stem_norm,
                stem_act,
                pool,
                blocks,
                proj,
            },
        ))
    }

    /// Accumulates parameter gradients; returns gradients wrt the images.
    pub fn backward(&mut self, cache: &BackboneCache<T>, upstream: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut g = self.proj.backward(&cache.proj, upstream)?;
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(bc, &g)?;
        }
        let g = max_pool_backward(&cache.pool, &g);
        let g = relu_backward(&cache.stem_act, &g)?;
        let g = self.stem_norm.backward(&cache.stem_norm, &g)?;
        self.stem_conv.backward(&cache.stem_conv, &g)
    }

    /// Folds batch statistics from a training pass into running averages.
    pub fn commit(&mut self, cache: &BackboneCache<T>) {
        self.stem_norm.commit(&cache.stem_norm);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            block.commit(bc);
        }
    }

    /// Non-trainable state (running statistics), by path.
    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stem_norm.visit_buffers(&join(prefix, "stem.norm"), f);
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, norm) in block.norms() {
                norm.visit_buffers(&join(prefix, &format!("blocks.{i}.{name}")), f);
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem_norm.visit_buffers_mut(&join(prefix, "stem.norm"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block
                .norm1
                .visit_buffers_mut(&join(prefix, &format!("blocks.{i}.norm1")), f);
            block
                .norm2
                .visit_buffers_mut(&join(prefix, &format!("blocks.{i}.norm2")), f);
            block
                .norm3
                .visit_buffers_mut(&join(prefix, &format!("blocks.{i}.norm3")), f);
            if let Some((_, n)) = &mut block.shortcut {
                n.visit_buffers_mut(&join(prefix, &format!("blocks.{i}.shortcut.norm")), f);
            }
        }
    }
}

impl<T: Real> Params<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.stem_conv.visit(&join(prefix, "stem.conv"), f);
        self.stem_norm.visit(&join(prefix, "stem.norm"), f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.stem_conv.visit_mut(&join(prefix, "stem.conv"), f);
        self.stem_norm.visit_mut(&join(prefix, "stem.norm"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_zero_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Tensor = normal(&[3, 5, 4], 1.0, &mut rng);
        let mut conv = Conv2d::<f32>::zeros(3, 3, 1, 1, 0, false);
        let (y0, _) = conv.forward_one(&x).unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.0));
        for i in 0..3 {
            conv.weight.data_mut()[i * 3 + i] = 1.0;
        }
        let (y, _) = conv.forward_one(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_out(224, 7, 2, 3).unwrap(), 112);
        assert_eq!(conv_out(112, 3, 2, 1).unwrap(), 56);
        assert_eq!(conv_out(5, 3, 1, 1).unwrap(), 5);
        assert!(conv_out(2, 5, 1, 0).is_err());
    }

    #[test]
    fn zeroed_branch_block_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor = normal(&[8, 4, 4], 1.0, &mut rng);
        for kind in [NormKind::Affine, NormKind::Batch] {
            let block = Bottleneck::<f32>::new::<ChaCha8Rng>(8, 4, 8, kind, None);
            let (y, _) = block.forward(std::slice::from_ref(&x), &Mode::Eval).unwrap();
            assert_eq!(y[0], x.map(|v| v.max(0.0)));
            assert_eq!(y[0].shape(), x.shape());
        }
    }

    #[test]
    fn toy_features_have_stride_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = Backbone::<f32>::init(&BackboneConfig::toy(), 12, &mut rng).unwrap();
        let img: Tensor = normal(&[3, 32, 32], 1.0, &mut rng);
        let (f, _) = bb.forward(&[img], &Mode::Eval).unwrap();
        assert_eq!(f[0].shape(), &[12, 8, 8]);
        assert!(matches!(Backbone::<f32>::feature_size(30, 32), Err(Error::Config(_))));
    }

    #[test]
    fn batch_norm_train_normalizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Tensor> = (0..3)
            .map(|_| normal(&[2, 3, 3], 2.0, &mut rng).map(|v| v + 5.0))
            .collect();
        let mut norm = ChannelNorm::new(NormKind::Batch, 2);
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let (ys, cache) = norm.forward(&xs, &Mode::Train(&mut drng)).unwrap();
        for cc in 0..2 {
            let vals: Vec<f32> = ys
                .iter()
                .flat_map(|y| y.data()[cc * 9..(cc + 1) * 9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f32>() / vals.len() as f32;
            assert!(mean.abs() < 1e-5);
        }
        norm.commit(&cache);
        assert!(norm.running_mean.data().iter().all(|&m| m > 0.3));
    }
}
