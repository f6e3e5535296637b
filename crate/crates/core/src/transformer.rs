//! Multi-head self-attention encoder layers over token matrices laid out
//! as `C×L` (one column per token).

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::mode::Mode;
use crate::ops::{
    add_row_bias, gelu, gelu_backward, layer_norm, layer_norm_backward, matmul, matmul_nt, matmul_tn, row_sums,
    softmax_rows, softmax_rows_backward, LayerNormCache, LN_EPS,
};
use crate::params::{join, ParamKind, Params};
use crate::scalar::{c, Real};
use crate::tensor::Tensor;

/// Projection init std for attention, FFN and the class token.
pub const INIT_STD: f64 = 0.02;
/// FFN hidden width as a multiple of the token dimension.
pub const FFN_RATIO: usize = 3;

// ---------------------------------------------------------------------------
// row-block helpers

fn row_block<T: Real>(t: &Tensor<T>, start: usize, rows: usize) -> Tensor<T> {
    let cols = t.shape()[1];
    Tensor::from_op(
        "row_block",
        &[rows, cols],
        t.data()[start * cols..(start + rows) * cols].to_vec(),
    )
}

fn set_row_block<T: Real>(dst: &mut Tensor<T>, start: usize, src: &Tensor<T>) {
    let cols = dst.shape()[1];
    let n = src.len();
    dst.data_mut()[start * cols..start * cols + n].copy_from_slice(src.data());
}

/// Hadamard product with an optional dropout mask.
fn apply_mask<T: Real>(x: &Tensor<T>, mask: &Option<Vec<T>>) -> Tensor<T> {
    match mask {
        Some(m) => Tensor::from_op(
            "dropout",
            x.shape(),
            x.data().iter().zip(m).map(|(&a, &b)| a * b).collect(),
        ),
        None => x.clone(),
    }
}

fn accumulate<T: Real>(param: &mut Tensor<T>, delta: &Tensor<T>) -> Result<()> {
    param.accumulate_grad(delta)
}

// ---------------------------------------------------------------------------
// scaled dot-product attention

/// Saved attention weights (`L×L`, row = query).
#[derive(Clone, Debug)]
pub struct AttentionCache<T = f32> {
    pub probs: Tensor<T>,
}

/// `softmax(QᵀK/√D)` applied to `V`, returned as `D×L`.
pub fn attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (d, l) = q.dims2()?;
    if k.shape() != q.shape() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if v.shape() != q.shape() {
        return Err(Error::shape("attention", q.shape(), v.shape()));
    }
    debug_assert!(d >= 1 && l >= 1);
    let scale = c::<T>(1.0 / (d as f64).sqrt());
    let scores = matmul_tn(q, k)?.scale(scale);
    let probs = softmax_rows(&scores)?;
    let out = matmul_nt(v, &probs)?;
    Ok((out, AttentionCache { probs }))
}

/// Adjoint of [`attention`]: `(dQ, dK, dV)`.
pub fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cache: &AttentionCache<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (d, _) = q.dims2()?;
    let scale = c::<T>(1.0 / (d as f64).sqrt());
    let dv = matmul(upstream, &cache.probs)?;
    let dprobs = matmul_tn(upstream, v)?;
    let dscores = softmax_rows_backward(&cache.probs, &dprobs)?.scale(scale);
    let dq = matmul_nt(k, &dscores)?;
    let dk = matmul(q, &dscores)?;
    Ok((dq, dk, dv))
}

// ---------------------------------------------------------------------------
// multi-head attention

/// Per-head projections stacked row-wise into `C×C` matrices: head `i`
/// owns rows `i·D .. (i+1)·D` of `wq`, `wk`, `wv`. The output projection
/// `wo` maps the concatenated heads (`C`) back to `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = f32> {
    pub heads: usize,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            heads,
            wq: Tensor::zeros(&[dim, dim]),
            wk: Tensor::zeros(&[dim, dim]),
            wv: Tensor::zeros(&[dim, dim]),
            wo: Tensor::zeros(&[dim, dim]),
        })
    }

    pub fn init<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            heads,
            wq: trunc_normal(&[dim, dim], INIT_STD, rng),
            wk: trunc_normal(&[dim, dim], INIT_STD, rng),
            wv: trunc_normal(&[dim, dim], INIT_STD, rng),
            wo: trunc_normal(&[dim, dim], INIT_STD, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "token dimension {dim} is not divisible by head count {heads}"
        )));
    }
    Ok(())
}

impl<T: Real> Params<T> for AttentionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "wq"), &self.wq, ParamKind::Weight);
        f(&join(prefix, "wk"), &self.wk, ParamKind::Weight);
        f(&join(prefix, "wv"), &self.wv, ParamKind::Weight);
        f(&join(prefix, "wo"), &self.wo, ParamKind::Weight);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "wq"), &mut self.wq, ParamKind::Weight);
        f(&join(prefix, "wk"), &mut self.wk, ParamKind::Weight);
        f(&join(prefix, "wv"), &mut self.wv, ParamKind::Weight);
        f(&join(prefix, "wo"), &mut self.wo, ParamKind::Weight);
    }
}

#[derive(Clone, Debug)]
pub struct MhaCache<T = f32> {
    input: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    heads: Vec<AttentionCache<T>>,
    concat: Tensor<T>,
}

impl<T> MhaCache<T> {
    /// Attention weights of each head (`L×L`, row = query).
    pub fn attention_weights(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.heads.iter().map(|h| &h.probs)
    }
}

/// Multi-head self-attention on `z[C×L]`.
pub fn mha<T: Real>(z: &Tensor<T>, p: &AttentionParams<T>) -> Result<(Tensor<T>, MhaCache<T>)> {
    let (dim, len) = z.dims2()?;
    if dim != p.dim() {
        return Err(Error::shape("mha", z.shape(), p.wq.shape()));
    }
    let d = p.head_dim();
    let q = matmul(&p.wq, z)?;
    let k = matmul(&p.wk, z)?;
    let v = matmul(&p.wv, z)?;
    let mut concat = Tensor::zeros(&[dim, len]);
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (out, cache) = attention(
            &row_block(&q, h * d, d),
            &row_block(&k, h * d, d),
            &row_block(&v, h * d, d),
        )?;
        set_row_block(&mut concat, h * d, &out);
        heads.push(cache);
    }
    let out = matmul(&p.wo, &concat)?;
    Ok((
        out,
        MhaCache {
            input: z.clone(),
            q,
            k,
            v,
            heads,
            concat,
        },
    ))
}

/// Adjoint of [`mha`]. Accumulates projection gradients into `p` and
/// returns the gradient wrt the input.
pub fn mha_backward<T: Real>(
    p: &mut AttentionParams<T>,
    cache: &MhaCache<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = p.head_dim();
    let (dim, len) = cache.input.dims2()?;
    accumulate(&mut p.wo, &matmul_nt(upstream, &cache.concat)?)?;
    let dconcat = matmul_tn(&p.wo, upstream)?;
    let mut dq = Tensor::zeros(&[dim, len]);
    let mut dk = Tensor::zeros(&[dim, len]);
    let mut dv = Tensor::zeros(&[dim, len]);
    for (h, hc) in cache.heads.iter().enumerate() {
        let (gq, gk, gv) = attention_backward(
            &row_block(&cache.q, h * d, d),
            &row_block(&cache.k, h * d, d),
            &row_block(&cache.v, h * d, d),
            hc,
            &row_block(&dconcat, h * d, d),
        )?;
        set_row_block(&mut dq, h * d, &gq);
        set_row_block(&mut dk, h * d, &gk);
        set_row_block(&mut dv, h * d, &gv);
    }
    accumulate(&mut p.wq, &matmul_nt(&dq, &cache.input)?)?;
    accumulate(&mut p.wk, &matmul_nt(&dk, &cache.input)?)?;
    accumulate(&mut p.wv, &matmul_nt(&dv, &cache.input)?)?;
    let mut dz = matmul_tn(&p.wq, &dq)?;
    dz.add_assign(&matmul_tn(&p.wk, &dk)?)?;
    dz.add_assign(&matmul_tn(&p.wv, &dv)?)?;
    Ok(dz)
}

// ---------------------------------------------------------------------------
// encoder layer

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> LayerNormParams<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], T::one()),
            beta: Tensor::zeros(&[dim]),
        }
    }

    /// Normalizes each token (column) of `x[C×L]`.
    pub fn forward_columns(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        let (y, cache) = layer_norm(&x.transpose()?, &self.gamma, &self.beta, LN_EPS)?;
        Ok((y.transpose()?, cache))
    }

    pub fn backward_columns(&mut self, cache: &LayerNormCache<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let (dx, dg, db) = layer_norm_backward(cache, &self.gamma, &upstream.transpose()?)?;
        self.gamma.accumulate_grad(&dg)?;
        self.beta.accumulate_grad(&db)?;
        dx.transpose()
    }
}

impl<T: Real> Params<T> for LayerNormParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Norm);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Norm);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Norm);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Norm);
    }
}

/// Two-layer feed-forward unit `C → 3C → C` with GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T = f32> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn zeros(dim: usize) -> Self {
        let hidden = FFN_RATIO * dim;
        Self {
            w1: Tensor::zeros(&[hidden, dim]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[dim, hidden]),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let hidden = FFN_RATIO * dim;
        Self {
            w1: trunc_normal(&[hidden, dim], INIT_STD, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: trunc_normal(&[dim, hidden], INIT_STD, rng),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }
}

impl<T: Real> Params<T> for FeedForward<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "w1"), &self.w1, ParamKind::Weight);
        f(&join(prefix, "b1"), &self.b1, ParamKind::Bias);
        f(&join(prefix, "w2"), &self.w2, ParamKind::Weight);
        f(&join(prefix, "b2"), &self.b2, ParamKind::Bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "w1"), &mut self.w1, ParamKind::Weight);
        f(&join(prefix, "b1"), &mut self.b1, ParamKind::Bias);
        f(&join(prefix, "w2"), &mut self.w2, ParamKind::Weight);
        f(&join(prefix, "b2"), &mut self.b2, ParamKind::Bias);
    }
}

/// Pre-norm encoder layer: `x + MHA(LN(x))`, then `+ FFN(LN(·))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams<T = f32> {
    pub norm1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub norm2: LayerNormParams<T>,
    pub ffn: FeedForward<T>,
    pub dropout: f64,
}

impl<T: Real> EncoderLayerParams<T> {
    pub fn zeros(dim: usize, heads: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            norm1: LayerNormParams::new(dim),
            attn: AttentionParams::zeros(dim, heads)?,
            norm2: LayerNormParams::new(dim),
            ffn: FeedForward::zeros(dim),
            dropout,
        })
    }

    pub fn init<R: Rng>(dim: usize, heads: usize, dropout: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: LayerNormParams::new(dim),
            attn: AttentionParams::init(dim, heads, rng)?,
            norm2: LayerNormParams::new(dim),
            ffn: FeedForward::init(dim, rng),
            dropout,
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.dim()
    }
}

impl<T: Real> Params<T> for EncoderLayerParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T = f32> {
    ln1: LayerNormCache<T>,
    mha: MhaCache<T>,
    mask_attn: Option<Vec<T>>,
    ln2: LayerNormCache<T>,
    ffn_in: Tensor<T>,
    pre_act: Tensor<T>,
    mask_ffn: Option<Vec<T>>,
    ffn_hidden: Tensor<T>,
}

pub fn encoder_layer<T: Real>(
    x: &Tensor<T>,
    p: &EncoderLayerParams<T>,
    mode: &mut Mode<'_>,
) -> Result<(Tensor<T>, EncoderCache<T>)> {
    let (dim, len) = x.dims2()?;
    if dim != p.dim() {
        return Err(Error::shape("encoder_layer", x.shape(), p.attn.wq.shape()));
    }
    let (a, ln1) = p.norm1.forward_columns(x)?;
    let (m, mha_cache) = mha(&a, &p.attn)?;
    let mask_attn = mode.dropout_mask(dim * len, p.dropout);
    let y1 = x.add(&apply_mask(&m, &mask_attn))?;

    let (b, ln2) = p.norm2.forward_columns(&y1)?;
    let pre_act = add_row_bias(&matmul(&p.ffn.w1, &b)?, &p.ffn.b1)?;
    let act = gelu(&pre_act);
    let mask_ffn = mode.dropout_mask(act.len(), p.dropout);
    let ffn_hidden = apply_mask(&act, &mask_ffn);
    let f = add_row_bias(&matmul(&p.ffn.w2, &ffn_hidden)?, &p.ffn.b2)?;
    let y = y1.add(&f)?;
    Ok((
        y,
        EncoderCache {
            ln1,
            mha: mha_cache,
            mask_attn,
            ln2,
            ffn_in: b,
            pre_act,
            mask_ffn,
            ffn_hidden,
        },
    ))
}

/// Adjoint of [`encoder_layer`]; accumulates into `p`'s gradient buffers.
pub fn encoder_layer_backward<T: Real>(
    p: &mut EncoderLayerParams<T>,
    cache: &EncoderCache<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    // y = y1 + W2·h' + b2
    p.ffn.b2.accumulate_grad(&row_sums(upstream, p.ffn.b2.shape())?)?;
    p.ffn.w2.accumulate_grad(&matmul_nt(upstream, &cache.ffn_hidden)?)?;
    let dh = apply_mask(&matmul_tn(&p.ffn.w2, upstream)?, &cache.mask_ffn);
    let dpre = gelu_backward(&cache.pre_act, &dh)?;
    p.ffn.b1.accumulate_grad(&row_sums(&dpre, p.ffn.b1.shape())?)?;
    p.ffn.w1.accumulate_grad(&matmul_nt(&dpre, &cache.ffn_in)?)?;
    let db = matmul_tn(&p.ffn.w1, &dpre)?;
    let mut dy1 = upstream.clone();
    dy1.add_assign(&p.norm2.backward_columns(&cache.ln2, &db)?)?;

    // y1 = x + drop(MHA(LN(x)))
    let dm = apply_mask(&dy1, &cache.mask_attn);
    let da = mha_backward(&mut p.attn, &cache.mha, &dm)?;
    let mut dx = dy1;
    dx.add_assign(&p.norm1.backward_columns(&cache.ln1, &da)?)?;
    Ok(dx)
}

// ---------------------------------------------------------------------------
// vision transformer module

#[derive(Clone, Debug)]
pub struct VtmCache<T = f32> {
    layers: Vec<EncoderCache<T>>,
}

/// Prepends the class token (column 0) to `tokens[C×L]` without any
/// positional term and applies the encoder stack.
pub fn vtm<T: Real>(
    tokens: &Tensor<T>,
    cls: &Tensor<T>,
    layers: &[EncoderLayerParams<T>],
    mode: &mut Mode<'_>,
) -> Result<(Tensor<T>, VtmCache<T>)> {
    let (dim, len) = tokens.dims2()?;
    if cls.len() != dim {
        return Err(Error::shape("vtm", tokens.shape(), cls.shape()));
    }
    let mut x = Tensor::zeros(&[dim, len + 1]);
    {
        let xd = x.data_mut();
        for ch in 0..dim {
            xd[ch * (len + 1)] = cls.data()[ch];
            xd[ch * (len + 1) + 1..(ch + 1) * (len + 1)].copy_from_slice(&tokens.data()[ch * len..(ch + 1) * len]);
        }
    }
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, cache) = encoder_layer(&x, layer, mode)?;
        caches.push(cache);
        x = y;
    }
    Ok((x, VtmCache { layers: caches }))
}

/// Adjoint of [`vtm`]: accumulates into the layers and `cls`, returns the
/// gradient wrt the input tokens.
pub fn vtm_backward<T: Real>(
    cls: &mut Tensor<T>,
    layers: &mut [EncoderLayerParams<T>],
    cache: &VtmCache<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = upstream.clone();
    for (layer, lc) in layers.iter_mut().zip(&cache.layers).rev() {
        g = encoder_layer_backward(layer, lc, &g)?;
    }
    let (dim, total) = g.dims2()?;
    let len = total - 1;
    let mut dcls = Vec::with_capacity(dim);
    let mut dtokens = Vec::with_capacity(dim * len);
    for ch in 0..dim {
        let row = &g.data()[ch * total..(ch + 1) * total];
        dcls.push(row[0]);
        dtokens.extend_from_slice(&row[1..]);
    }
    cls.accumulate_grad(&Tensor::from_op("vtm_backward", cls.shape(), dcls))?;
    Ok(Tensor::from_op("vtm_backward", &[dim, len], dtokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::init::normal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_token_attention_returns_values() {
        let mut r = rng(1);
        let q: Tensor = normal(&[3, 1], 1.0, &mut r);
        let k = normal(&[3, 1], 1.0, &mut r);
        let v = normal(&[3, 1], 1.0, &mut r);
        let (out, _) = attention(&q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&v).unwrap() < 1e-7);
    }

    #[test]
    fn zero_keys_average_values() {
        let mut r = rng(2);
        let q: Tensor = normal(&[4, 5], 1.0, &mut r);
        let k = Tensor::zeros(&[4, 5]);
        let v = normal(&[4, 5], 1.0, &mut r);
        let (out, _) = attention(&q, &k, &v).unwrap();
        for d in 0..4 {
            let mean = (0..5).map(|j| v.at2(d, j)).sum::<f32>() / 5.0;
            for j in 0..5 {
                assert!((out.at2(d, j) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_head_identity_projections_reduce_to_attention() {
        let mut r = rng(3);
        let z: Tensor = normal(&[4, 6], 1.0, &mut r);
        let mut p = AttentionParams::zeros(4, 1).unwrap();
        p.wq = Tensor::eye(4);
        p.wk = Tensor::eye(4);
        p.wv = Tensor::eye(4);
        p.wo = Tensor::eye(4);
        let (a, _) = mha(&z, &p).unwrap();
        let (b, _) = attention(&z, &z, &z).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let mut r = rng(4);
        let z: Tensor = normal(&[8, 5], 1.0, &mut r);
        let mut p = AttentionParams::init(8, 2, &mut r).unwrap();
        p.wo = Tensor::zeros(&[8, 8]);
        let (out, _) = mha(&z, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_must_divide_dimension() {
        assert!(matches!(AttentionParams::<f32>::zeros(10, 3), Err(Error::Config(_))));
    }

    #[test]
    fn zeroed_branches_are_identity() {
        let mut r = rng(5);
        let x: Tensor = normal(&[8, 6], 1.0, &mut r);
        let mut p = EncoderLayerParams::init(8, 2, 0.0, &mut r).unwrap();
        p.attn.wo = Tensor::zeros(&[8, 8]);
        p.ffn.w2 = Tensor::zeros(&[8, 24]);
        let (y, _) = encoder_layer(&x, &p, &mut Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ffn_hidden_is_three_times_dim() {
        let p = EncoderLayerParams::<f32>::zeros(12, 3, 0.1).unwrap();
        assert_eq!(p.ffn.hidden(), 36);
        assert_eq!(p.param_count(), 10 * 144 + 8 * 12);
    }

    #[test]
    fn empty_stack_is_raw_concatenation() {
        let mut r = rng(6);
        let t: Tensor = normal(&[4, 3], 1.0, &mut r);
        let cls = normal(&[4, 1], 1.0, &mut r);
        let (out, _) = vtm(&t, &cls, &[], &mut Mode::Eval).unwrap();
        assert_eq!(out.shape(), &[4, 4]);
        for ch in 0..4 {
            assert_eq!(out.at2(ch, 0), cls.data()[ch]);
            for j in 0..3 {
                assert_eq!(out.at2(ch, j + 1), t.at2(ch, j));
            }
        }
    }

    #[test]
    fn dropout_is_reproducible_under_seed() {
        let mut r = rng(7);
        let x: Tensor = normal(&[8, 5], 1.0, &mut r);
        let p = EncoderLayerParams::init(8, 2, 0.3, &mut r).unwrap();
        let run = |seed| {
            let mut dr = rng(seed);
            encoder_layer(&x, &p, &mut Mode::Train(&mut dr)).unwrap().0
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
        let (e1, _) = encoder_layer(&x, &p, &mut Mode::Eval).unwrap();
        let (e2, _) = encoder_layer(&x, &p, &mut Mode::Eval).unwrap();
        assert_eq!(e1, e2);
    }
}
