//! Progressive sampling: tokens are gathered from a feature map at
//! learned, iteratively refined locations.
//!
//! Locations are `2×n²` matrices in feature-map pixel units, row 0 holding
//! `y` and row 1 holding `x`. The running location sum is kept unclamped;
//! only the location actually sampled is clamped into the map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::kinks;
use crate::mode::Mode;
use crate::ops::{matmul, matmul_nt, matmul_tn};
use crate::params::{join, ParamKind, Params};
use crate::scalar::{c, Real};
use crate::tensor::Tensor;
use crate::trajectory::TrajectoryLog;
use crate::transformer::{encoder_layer, encoder_layer_backward, EncoderCache, EncoderLayerParams, INIT_STD};

/// Regular sampling grid over an `H×W` feature map with `n` points per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub n: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("samples per axis must be >= 1".into()));
        }
        if n > height || n > width {
            return Err(Error::Config(format!(
                "{n} samples per axis do not fit a {height}x{width} feature map"
            )));
        }
        Ok(Self { height, width, n })
    }

    pub fn step_y(&self) -> f64 {
        self.height as f64 / self.n as f64
    }

    pub fn step_x(&self) -> f64 {
        self.width as f64 / self.n as f64
    }

    pub fn num_points(&self) -> usize {
        self.n * self.n
    }

    /// `(row, col)` grid indices of point `i` (row-major).
    pub fn grid_index(&self, i: usize) -> (usize, usize) {
        let row = i / self.n;
        (row, i - row * self.n)
    }
}

/// Cell centers of the regular grid, enumerated row-major.
pub fn init_grid<T: Real>(spec: &GridSpec) -> Tensor<T> {
    let count = spec.num_points();
    let (sy, sx) = (spec.step_y(), spec.step_x());
    let mut data = vec![T::zero(); 2 * count];
    for i in 0..count {
        let (gy, gx) = spec.grid_index(i);
        data[i] = c(gy as f64 * sy + sy / 2.0);
        data[count + i] = c(gx as f64 * sx + sx / 2.0);
    }
    Tensor::from_op("init_grid", &[2, count], data)
}

fn check_locations<T: Real>(p: &Tensor<T>) -> Result<usize> {
    let (rows, count) = p.dims2()?;
    if rows != 2 {
        return Err(Error::shape("locations", p.shape(), &[2, count]));
    }
    for i in 0..count {
        let (y, x) = (p.data()[i], p.data()[count + i]);
        if !y.is_finite() || !x.is_finite() {
            return Err(Error::Sampling {
                index: i,
                y: y.as_f64(),
                x: x.as_f64(),
            });
        }
    }
    Ok(count)
}

/// Clamps locations into `[0,H−1]×[0,W−1]`; the mask marks coordinates
/// that were inside (where the clamp has unit derivative).
pub fn clamp_locations<T: Real>(p: &Tensor<T>, height: usize, width: usize) -> Result<(Tensor<T>, Vec<bool>)> {
    let count = check_locations(p)?;
    let mut out = p.data().to_vec();
    let mut inside = vec![true; 2 * count];
    for (k, v) in out.iter_mut().enumerate() {
        let hi = c::<T>(if k < count { height - 1 } else { width - 1 } as f64);
        if *v < T::zero() {
            *v = T::zero();
            inside[k] = false;
        } else if *v > hi {
            *v = hi;
            inside[k] = false;
        }
    }
    kinks::record(inside.iter().map(|&b| u64::from(b)));
    Ok((Tensor::from_op("clamp_locations", p.shape(), out), inside))
}

/// Lower neighbor and fractional weight along one axis. The lower index is
/// capped at `size−2` so a location on the last pixel puts weight 1 on it.
#[inline]
fn axis_weights<T: Real>(v: T, size: usize) -> (usize, Option<usize>, T) {
    if size == 1 {
        return (0, None, T::zero());
    }
    let i0 = v.floor().as_f64().max(0.0) as usize;
    let i0 = i0.min(size - 2);
    (i0, Some(i0 + 1), v - c(i0 as f64))
}

fn feature_dims<T: Real>(feature: &Tensor<T>) -> Result<(usize, usize, usize)> {
    feature.dims3()
}

fn check_in_bounds<T: Real>(p: &Tensor<T>, height: usize, width: usize) -> Result<usize> {
    let count = check_locations(p)?;
    for i in 0..count {
        let (y, x) = (p.data()[i].as_f64(), p.data()[count + i].as_f64());
        if y < 0.0 || y > (height - 1) as f64 || x < 0.0 || x > (width - 1) as f64 {
            return Err(Error::Contract(format!(
                "location {i} ({y}, {x}) lies outside the {height}x{width} map; clamp first"
            )));
        }
    }
    Ok(count)
}

/// Bilinear gather of feature columns at fractional locations:
/// `out[:, i] = Σ_q K(q, p_i)·F[:, q]` with the separable triangular kernel.
pub fn bilinear_sample<T: Real>(feature: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
    let (ch, h, w) = feature_dims(feature)?;
    let count = check_in_bounds(p, h, w)?;
    let f = feature.data();
    let mut out = vec![T::zero(); ch * count];
    for i in 0..count {
        let (y0, y1, wy) = axis_weights(p.data()[i], h);
        let (x0, x1, wx) = axis_weights(p.data()[count + i], w);
        kinks::record([y0 as u64, x0 as u64]);
        let taps = [
            (Some(y0), Some(x0), (T::one() - wy) * (T::one() - wx)),
            (Some(y0), x1, (T::one() - wy) * wx),
            (y1, Some(x0), wy * (T::one() - wx)),
            (y1, x1, wy * wx),
        ];
        for (yy, xx, k) in taps {
            let (Some(yy), Some(xx)) = (yy, xx) else { continue };
            if k == T::zero() {
                continue;
            }
            let base = yy * w + xx;
            for cc in 0..ch {
                out[cc * count + i] = out[cc * count + i] + k * f[cc * h * w + base];
            }
        }
    }
    Ok(Tensor::from_op("bilinear_sample", &[ch, count], out))
}

/// Adjoint of [`bilinear_sample`]: `(dF, dp)`.
///
/// `dp` differentiates the kernel weights (slope ±1 along one axis times the
/// weight on the other), contracted with the feature values and upstream.
pub fn bilinear_backward<T: Real>(
    feature: &Tensor<T>,
    p: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (ch, h, w) = feature_dims(feature)?;
    let count = check_in_bounds(p, h, w)?;
    if upstream.shape() != [ch, count] {
        return Err(Error::shape("bilinear_backward", upstream.shape(), &[ch, count]));
    }
    let f = feature.data();
    let g = upstream.data();
    let mut df = vec![T::zero(); ch * h * w];
    let mut dp = vec![T::zero(); 2 * count];
    let at = |cc: usize, yy: Option<usize>, xx: Option<usize>| match (yy, xx) {
        (Some(yy), Some(xx)) => f[cc * h * w + yy * w + xx],
        _ => T::zero(),
    };
    for i in 0..count {
        let (y0, y1, wy) = axis_weights(p.data()[i], h);
        let (x0, x1, wx) = axis_weights(p.data()[count + i], w);
        let (y0, x0) = (Some(y0), Some(x0));
        let (uy, ux) = (T::one() - wy, T::one() - wx);
        let mut gy = T::zero();
        let mut gx = T::zero();
        for cc in 0..ch {
            let up = g[cc * count + i];
            if up == T::zero() {
                continue;
            }
            let (f00, f01, f10, f11) = (at(cc, y0, x0), at(cc, y0, x1), at(cc, y1, x0), at(cc, y1, x1));
            if y1.is_some() {
                gy = gy + up * (ux * (f10 - f00) + wx * (f11 - f01));
            }
            if x1.is_some() {
                gx = gx + up * (uy * (f01 - f00) + wy * (f11 - f10));
            }
            let plane = cc * h * w;
            for (yy, xx, k) in [
                (y0, x0, uy * ux),
                (y0, x1, uy * wx),
                (y1, x0, wy * ux),
                (y1, x1, wy * wx),
            ] {
                if let (Some(yy), Some(xx)) = (yy, xx) {
                    let idx = plane + yy * w + xx;
                    df[idx] = df[idx] + k * up;
                }
            }
        }
        dp[i] = gy;
        dp[count + i] = gx;
    }
    Ok((
        Tensor::from_op("bilinear_backward", feature.shape(), df),
        Tensor::from_op("bilinear_backward", p.shape(), dp),
    ))
}

fn axis_scale(size: usize) -> f64 {
    if size > 1 {
        2.0 / (size - 1) as f64
    } else {
        0.0
    }
}

/// Maps pixel locations affinely to `[−1, 1]` per axis.
pub fn normalize_locations<T: Real>(p: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let count = check_locations(p)?;
    let (sy, sx) = (axis_scale(height), axis_scale(width));
    let data = p
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let (s, size) = if k < count { (sy, height) } else { (sx, width) };
            if size > 1 {
                v * c(s) - T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(Tensor::from_op("normalize_locations", p.shape(), data))
}

/// Positional encodings `W·normalize(p)` (`C×n²`).
pub fn positional_embed<T: Real>(p: &Tensor<T>, proj: &Tensor<T>, spec: &GridSpec) -> Result<Tensor<T>> {
    let (_, two) = proj.dims2()?;
    if two != 2 {
        return Err(Error::shape("positional_embed", proj.shape(), &[proj.shape()[0], 2]));
    }
    matmul(proj, &normalize_locations(p, spec.height, spec.width)?)
}

/// Adjoint of [`positional_embed`]: `(dp, dW)`.
pub fn positional_embed_backward<T: Real>(
    p: &Tensor<T>,
    proj: &Tensor<T>,
    spec: &GridSpec,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let normalized = normalize_locations(p, spec.height, spec.width)?;
    let dw = matmul_nt(upstream, &normalized)?;
    let dnorm = matmul_tn(proj, upstream)?;
    let count = normalized.shape()[1];
    let (sy, sx) = (axis_scale(spec.height), axis_scale(spec.width));
    let dp = dnorm
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| v * c(if k < count { sy } else { sx }))
        .collect();
    Ok((Tensor::from_op("positional_embed_backward", p.shape(), dp), dw))
}

/// Offsets `M·T` (pixel units) for iteration `t` (1-based) of `iterations`.
/// The last iteration predicts no offsets.
pub fn predict_offsets<T: Real>(
    tokens: &Tensor<T>,
    head: &Tensor<T>,
    t: usize,
    iterations: usize,
) -> Result<Tensor<T>> {
    if t == 0 || t >= iterations {
        return Err(Error::Contract(format!(
            "offsets are predicted only for iterations 1..{}, not {t}",
            iterations.saturating_sub(1)
        )));
    }
    if head.shape()[0] != 2 {
        return Err(Error::shape("predict_offsets", head.shape(), tokens.shape()));
    }
    matmul(head, tokens)
}

/// Adjoint of [`predict_offsets`]: `(dT, dM)`.
pub fn predict_offsets_backward<T: Real>(
    tokens: &Tensor<T>,
    head: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((matmul_tn(head, upstream)?, matmul_nt(upstream, tokens)?))
}

// ---------------------------------------------------------------------------
// parameters

/// Learnable state of the sampler: one positional projection for all
/// iterations, an encoder layer per iteration and an offset head per
/// non-final iteration. Under weight sharing every iteration aliases the
/// first layer and head.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerParams<T = f32> {
    pub pos_proj: Tensor<T>,
    pub layers: Vec<EncoderLayerParams<T>>,
    pub offset_heads: Vec<Tensor<T>>,
    pub iterations: usize,
    pub shared: bool,
}

impl<T: Real> SamplerParams<T> {
    pub fn init<R: Rng>(
        dim: usize,
        heads: usize,
        iterations: usize,
        dropout: f64,
        shared: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Config("sampling iterations must be >= 1".into()));
        }
        let pos_proj = trunc_normal(&[dim, 2], INIT_STD, rng);
        let (n_layers, n_heads) = Self::counts(iterations, shared);
        let layers = (0..n_layers)
            .map(|_| EncoderLayerParams::init(dim, heads, dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let offset_heads = (0..n_heads).map(|_| Tensor::zeros(&[2, dim])).collect();
        Ok(Self {
            pos_proj,
            layers,
            offset_heads,
            iterations,
            shared,
        })
    }

    pub fn zeros(dim: usize, heads: usize, iterations: usize, dropout: f64, shared: bool) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Config("sampling iterations must be >= 1".into()));
        }
        let (n_layers, n_heads) = Self::counts(iterations, shared);
        Ok(Self {
            pos_proj: Tensor::zeros(&[dim, 2]),
            layers: (0..n_layers)
                .map(|_| EncoderLayerParams::zeros(dim, heads, dropout))
                .collect::<Result<_>>()?,
            offset_heads: (0..n_heads).map(|_| Tensor::zeros(&[2, dim])).collect(),
            iterations,
            shared,
        })
    }

    /// Number of distinct (encoder layers, offset heads).
    pub fn counts(iterations: usize, shared: bool) -> (usize, usize) {
        let heads = iterations - 1;
        if shared {
            (1, heads.min(1))
        } else {
            (iterations, heads)
        }
    }

    pub fn dim(&self) -> usize {
        self.pos_proj.shape()[0]
    }

    /// Storage index of the encoder layer used at iteration `t` (1-based).
    pub fn layer_index(&self, t: usize) -> usize {
        if self.shared {
            0
        } else {
            t - 1
        }
    }

    /// Storage index of the offset head used at iteration `t` (1-based, `t < N`).
    pub fn head_index(&self, t: usize) -> usize {
        self.layer_index(t)
    }

    /// Makes every iteration alias the first iteration's layer and head.
    pub fn tie(&mut self) -> Result<()> {
        if self.shared {
            return Err(Error::Contract("sampler weights are already shared".into()));
        }
        self.layers.truncate(1);
        self.offset_heads.truncate(1);
        self.shared = true;
        Ok(())
    }
}

impl<T: Real> Params<T> for SamplerParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "pos_proj"), &self.pos_proj, ParamKind::Weight);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        for (i, head) in self.offset_heads.iter().enumerate() {
            f(&join(prefix, &format!("offset_heads.{i}")), head, ParamKind::Weight);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "pos_proj"), &mut self.pos_proj, ParamKind::Weight);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        for (i, head) in self.offset_heads.iter_mut().enumerate() {
            f(&join(prefix, &format!("offset_heads.{i}")), head, ParamKind::Weight);
        }
    }
}

// ---------------------------------------------------------------------------
// the iterative loop

/// Everything one sampling iteration produced.
#[derive(Clone, Debug)]
pub struct SamplingState<T = f32> {
    /// 1-based iteration index.
    pub t: usize,
    /// Unclamped running location sum.
    pub locations: Tensor<T>,
    /// Location actually sampled (clamped into the map).
    pub sampled_at: Tensor<T>,
    inside: Vec<bool>,
    pub sampled_tokens: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub tokens: Tensor<T>,
    /// Offsets toward the next iteration; `None` at the last iteration.
    pub offsets: Option<Tensor<T>>,
    encoder: EncoderCache<T>,
}

#[derive(Clone, Debug)]
pub struct SamplerCache<T = f32> {
    pub spec: GridSpec,
    pub states: Vec<SamplingState<T>>,
}

impl<T: Real> SamplerCache<T> {
    pub fn trajectory(&self) -> TrajectoryLog {
        TrajectoryLog::new(
            self.spec,
            self.states.iter().map(|s| s.locations.cast()).collect(),
            self.states.iter().map(|s| s.sampled_at.cast()).collect(),
        )
    }
}

/// Runs the N-iteration sampling loop over `feature[C×H×W]` and returns the
/// final tokens `T_N` (`C×n²`).
pub fn progressive_sample<T: Real>(
    feature: &Tensor<T>,
    params: &SamplerParams<T>,
    spec: &GridSpec,
    mode: &mut Mode<'_>,
) -> Result<(Tensor<T>, SamplerCache<T>)> {
    let (ch, h, w) = feature_dims(feature)?;
    if (h, w) != (spec.height, spec.width) {
        return Err(Error::shape(
            "progressive_sample",
            feature.shape(),
            &[ch, spec.height, spec.width],
        ));
    }
    if ch != params.dim() {
        return Err(Error::shape(
            "progressive_sample",
            feature.shape(),
            params.pos_proj.shape(),
        ));
    }
    let n_iter = params.iterations;
    let mut locations = init_grid::<T>(spec);
    let mut prev = Tensor::zeros(&[ch, spec.num_points()]);
    let mut states = Vec::with_capacity(n_iter);
    for t in 1..=n_iter {
        let (sampled_at, inside) = clamp_locations(&locations, h, w)?;
        let sampled_tokens = bilinear_sample(feature, &sampled_at)?;
        let pos_embed = positional_embed(&sampled_at, &params.pos_proj, spec)?;
        let mut x = sampled_tokens.add(&pos_embed)?;
        x.add_assign(&prev)?;
        let (tokens, encoder) = encoder_layer(&x, &params.layers[params.layer_index(t)], mode)?;
        let offsets = if t < n_iter {
            Some(predict_offsets(
                &tokens,
                &params.offset_heads[params.head_index(t)],
                t,
                n_iter,
            )?)
        } else {
            None
        };
        let next = match &offsets {
            Some(o) => Some(locations.add(o)?),
            None => None,
        };
        prev = tokens.clone();
        states.push(SamplingState {
            t,
            locations: locations.clone(),
            sampled_at,
            inside,
            sampled_tokens,
            pos_embed,
            tokens,
            offsets,
            encoder,
        });
        if let Some(next) = next {
            locations = next;
        }
    }
    Ok((prev, SamplerCache { spec: *spec, states }))
}

/// Adjoint of [`progressive_sample`]. Accumulates parameter gradients into
/// `params` and returns the gradient wrt the feature map.
pub fn progressive_sample_backward<T: Real>(
    feature: &Tensor<T>,
    params: &mut SamplerParams<T>,
    cache: &SamplerCache<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let spec = cache.spec;
    let n_iter = cache.states.len();
    let count = spec.num_points();
    let mut dfeature = Tensor::zeros(feature.shape());
    let mut dpos_proj = Tensor::zeros(params.pos_proj.shape());
    // gradient flowing into T_t and p_t for the iteration being processed
    let mut dtokens = upstream.clone();
    let mut dloc = Tensor::<T>::zeros(&[2, count]);
    for state in cache.states.iter().rev() {
        let t = state.t;
        let li = params.layer_index(t);
        let dx = encoder_layer_backward(&mut params.layers[li], &state.encoder, &dtokens)?;

        let (df, dp_sample) = bilinear_backward(feature, &state.sampled_at, &dx)?;
        dfeature.add_assign(&df)?;
        let (dp_pos, dw) = positional_embed_backward(&state.sampled_at, &params.pos_proj, &spec, &dx)?;
        dpos_proj.add_assign(&dw)?;
        for (k, g) in dloc.data_mut().iter_mut().enumerate() {
            if state.inside[k] {
                *g = *g + dp_sample.data()[k] + dp_pos.data()[k];
            }
        }

        if t == 1 {
            break;
        }
        // p_t = p_{t-1} + M_{t-1}·T_{t-1}; dloc carries over to p_{t-1} unchanged.
        let prev = &cache.states[t - 2];
        let hi = params.head_index(t - 1);
        let (dt_off, dm) = predict_offsets_backward(&prev.tokens, &params.offset_heads[hi], &dloc)?;
        params.offset_heads[hi].accumulate_grad(&dm)?;
        dtokens = dx;
        dtokens.add_assign(&dt_off)?;
    }
    debug_assert!(n_iter >= 1);
    params.pos_proj.accumulate_grad(&dpos_proj)?;
    Ok(dfeature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(p: &Tensor) -> Vec<(f32, f32)> {
        let n = p.shape()[1];
        (0..n).map(|i| (p.data()[i], p.data()[n + i])).collect()
    }

    #[test]
    fn grid_four_by_four_two_samples() {
        let g: Tensor = init_grid(&GridSpec::new(4, 4, 2).unwrap());
        assert_eq!(pts(&g), vec![(1., 1.), (1., 3.), (3., 1.), (3., 3.)]);
    }

    #[test]
    fn grid_single_point() {
        let g: Tensor = init_grid(&GridSpec::new(10, 10, 1).unwrap());
        assert_eq!(pts(&g), vec![(5., 5.)]);
    }

    #[test]
    fn grid_rejects_too_many_samples() {
        assert!(matches!(GridSpec::new(4, 8, 5), Err(Error::Config(_))));
        assert!(GridSpec::new(4, 4, 0).is_err());
    }

    #[test]
    fn integer_location_returns_exact_column() {
        let f: Tensor = Tensor::from_fn(&[3, 5, 6], |i| i as f32 * 0.5 - 7.0);
        let p = Tensor::new(&[2, 1], vec![2.0, 3.0]).unwrap();
        let out = bilinear_sample(&f, &p).unwrap();
        for ch in 0..3 {
            assert_eq!(out.data()[ch], f.data()[ch * 30 + 2 * 6 + 3]);
        }
    }

    #[test]
    fn midpoint_is_mean_of_neighbours() {
        let f: Tensor = Tensor::from_fn(&[2, 4, 4], |i| ((i * 7) % 11) as f32);
        let p = Tensor::new(&[2, 1], vec![1.5, 2.5]).unwrap();
        let out = bilinear_sample(&f, &p).unwrap();
        for ch in 0..2 {
            let at = |y: usize, x: usize| f.data()[ch * 16 + y * 4 + x];
            let mean = (at(1, 2) + at(1, 3) + at(2, 2) + at(2, 3)) / 4.0;
            assert!((out.data()[ch] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn last_pixel_is_reachable() {
        let f: Tensor = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        let p = Tensor::new(&[2, 1], vec![2.0, 2.0]).unwrap();
        assert_eq!(bilinear_sample(&f, &p).unwrap().data(), &[8.0]);
    }

    #[test]
    fn non_finite_location_names_index() {
        let f: Tensor = Tensor::zeros(&[1, 3, 3]);
        let mut p = Tensor::<f32>::zeros(&[2, 2]);
        p.data_mut()[3] = f32::NAN;
        match bilinear_sample(&f, &p) {
            Err(Error::Sampling { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            clamp_locations(&p, 3, 3),
            Err(Error::Sampling { index: 1, .. })
        ));
    }

    #[test]
    fn symmetric_neighbours_give_zero_x_slope() {
        let mut f: Tensor = Tensor::zeros(&[1, 2, 2]);
        f.data_mut().copy_from_slice(&[4.0, 4.0, 1.0, 1.0]);
        let p = Tensor::new(&[2, 1], vec![0.3, 0.5]).unwrap();
        let up = Tensor::full(&[1, 1], 1.0);
        let (_, dp) = bilinear_backward(&f, &p, &up).unwrap();
        assert_eq!(dp.data()[1], 0.0);
    }

    #[test]
    fn x_ramp_has_unit_slope() {
        let f: Tensor = Tensor::from_fn(&[1, 5, 5], |i| (i % 5) as f32);
        let p = Tensor::new(&[2, 1], vec![2.3, 1.7]).unwrap();
        let up = Tensor::full(&[1, 1], 2.5);
        let (_, dp) = bilinear_backward(&f, &p, &up).unwrap();
        assert!((dp.data()[1] - 2.5).abs() < 1e-6);
        assert!(dp.data()[0].abs() < 1e-6);
    }

    #[test]
    fn positional_zero_cases() {
        let spec = GridSpec::new(5, 7, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Tensor::new(&[2, 1], vec![2.0, 3.0]).unwrap();
        let w: Tensor = normal(&[6, 2], 1.0, &mut rng);
        assert!(positional_embed(&p, &w, &spec)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let p2 = Tensor::new(&[2, 1], vec![1.0, 4.0]).unwrap();
        let zero = Tensor::zeros(&[6, 2]);
        assert!(positional_embed(&p2, &zero, &spec)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn offsets_zero_and_selector() {
        let tokens = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let zero = Tensor::zeros(&[2, 2]);
        assert!(predict_offsets(&tokens, &zero, 1, 2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let sel = Tensor::eye(2);
        assert_eq!(predict_offsets(&tokens, &sel, 1, 2).unwrap(), tokens);
    }

    #[test]
    fn offsets_not_predicted_at_last_iteration() {
        let tokens = Tensor::<f32>::zeros(&[2, 3]);
        let head = Tensor::zeros(&[2, 2]);
        assert!(matches!(predict_offsets(&tokens, &head, 3, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn clamp_marks_saturated_coordinates() {
        let p = Tensor::new(&[2, 2], vec![-1.0, 2.0, 1.0, 9.0]).unwrap();
        let (q, inside) = clamp_locations(&p, 4, 5).unwrap();
        assert_eq!(q.data(), &[0.0, 2.0, 1.0, 4.0]);
        assert_eq!(inside, vec![false, true, true, false]);
    }

    #[test]
    fn tying_twice_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = SamplerParams::<f32>::init(8, 2, 3, 0.0, false, &mut rng).unwrap();
        assert_eq!((s.layers.len(), s.offset_heads.len()), (3, 2));
        s.tie().unwrap();
        assert_eq!((s.layers.len(), s.offset_heads.len()), (1, 1));
        assert!(s.tie().is_err());
    }
}
