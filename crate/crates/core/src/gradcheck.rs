//! Central-difference audits of analytic adjoints.
//!
//! The analytic side runs in `f32`; the numeric side re-evaluates the
//! forward pass in `f64` through the same generic code.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::backbone::{
    max_pool, max_pool_backward, relu, relu_backward, Backbone, BackboneConfig, Bottleneck, ChannelNorm, Conv2d,
    NormKind,
};
use crate::error::{Error, Result};
use crate::init::normal;
use crate::kinks;
use crate::mode::Mode;
use crate::model::{PsVit, PsVitConfig};
use crate::ops::{
    cross_entropy_smoothed, gelu, gelu_backward, layer_norm, layer_norm_backward, matmul, matmul_backward,
    softmax_rows, softmax_rows_backward, LN_EPS,
};
use crate::params::{ParamKind, Params};
use crate::sampling::{
    bilinear_backward, bilinear_sample, positional_embed, positional_embed_backward, predict_offsets,
    predict_offsets_backward, progressive_sample, progressive_sample_backward, GridSpec, SamplerParams,
};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::transformer::{
    attention, attention_backward, encoder_layer, encoder_layer_backward, mha, mha_backward, vtm, vtm_backward,
    AttentionParams, EncoderLayerParams,
};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const OP_TOL: f64 = 1e-3;
pub const COMPOSED_TOL: f64 = 1e-2;
/// Below this scale both gradients count as zero.
const ZERO_SCALE: f64 = 1e-10;
pub const MAX_SKIPPED: f64 = 0.25;
/// Coordinates per input for subsampled audits.
pub const SUBSET_COORDS: usize = 24;

/// A forward map with a hand-written adjoint.
pub trait DiffOp {
    fn name(&self) -> String;

    fn input_names(&self, count: usize) -> Vec<String> {
        (0..count).map(|i| format!("input{i}")).collect()
    }

    fn forward<T: Real>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>>;

    /// Gradients wrt each input, for upstream gradient `upstream` at `output`.
    fn adjoint<T: Real>(
        &self,
        inputs: &[Tensor<T>],
        output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditConfig {
    pub h: f64,
    pub tol: f64,
    /// Cap on audited coordinates per input (random subset); `None` checks all.
    pub max_coords: Option<usize>,
    /// Largest tolerated fraction of coordinates excluded for crossing a
    /// branch switch within `±h`.
    pub max_skipped: f64,
}

impl AuditConfig {
    pub fn new(h: f64, tol: f64) -> Self {
        Self {
            h,
            tol,
            max_coords: None,
            max_skipped: MAX_SKIPPED,
        }
    }
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self::new(DEFAULT_STEP, OP_TOL)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputError {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub coords: usize,
    /// Coordinates excluded because `x±h` switched branch.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub inputs: Vec<InputError>,
    pub tol: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn max_rel(&self) -> f64 {
        self.inputs.iter().map(|e| e.max_rel).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.inputs.iter().map(|e| e.max_abs).fold(0.0, f64::max)
    }

    pub fn coords(&self) -> usize {
        self.inputs.iter().map(|e| e.coords).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|e| e.skipped).sum()
    }

    pub fn worst(&self) -> Option<&InputError> {
        self.inputs.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let worst = self.worst().map_or("-", |w| w.name.as_str());
        write!(
            f,
            "{:<20} {:>4}  max_rel={:.3e}  max_abs={:.3e}  tol={:.0e}  coords={} kinked={}  worst={}",
            self.op,
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel(),
            self.max_abs(),
            self.tol,
            self.coords(),
            self.skipped(),
            worst
        )
    }
}

fn ensure_finite(value: f64, op: &str, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            context: format!("audit of {op} aborted: {what} evaluated to {value}"),
            index: 0,
        })
    }
}

fn dot<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.as_f64() * y.as_f64())
        .sum()
}

/// Central-difference estimates for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct NumericGrad {
    pub coords: Vec<usize>,
    pub values: Vec<f64>,
    /// False where `x±h` land on a different smooth piece than `x`.
    pub smooth: Vec<bool>,
}

/// Central differences of `loss` at `inputs`, flagging coordinates whose
/// step crosses a branch switch (see [`crate::kinks`]).
pub fn numeric_gradients(
    inputs: &[Tensor<f64>],
    mut loss: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    cfg: &AuditConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<NumericGrad>> {
    let mut xs = inputs.to_vec();
    let (base, base_sig) = kinks::watch(|| loss(&xs));
    base?;
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..xs.len() {
        let len = xs[i].len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < len => {
                let mut c = sample(rng, len, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut values = Vec::with_capacity(coords.len());
        let mut smooth = Vec::with_capacity(coords.len());
        for &j in &coords {
            let x0 = xs[i].data()[j];
            let (xp, xm) = (x0 + cfg.h, x0 - cfg.h);
            xs[i].data_mut()[j] = xp;
            let (fp, sp) = kinks::watch(|| loss(&xs));
            xs[i].data_mut()[j] = xm;
            let (fm, sm) = kinks::watch(|| loss(&xs));
            xs[i].data_mut()[j] = x0;
            values.push((fp? - fm?) / (xp - xm));
            smooth.push(sp == base_sig && sm == base_sig);
        }
        out.push(NumericGrad { coords, values, smooth });
    }
    Ok(out)
}

/// Compares analytic gradients with numeric estimates on the audited smooth
/// coordinates. Relative error is `max|a−n| / max(‖a‖∞, ‖n‖∞)` per input.
pub fn compare(
    op: &str,
    names: &[String],
    analytic: &[Tensor<f32>],
    numeric: &[NumericGrad],
    cfg: &AuditConfig,
) -> Result<GradReport> {
    if analytic.len() != numeric.len() || names.len() != numeric.len() {
        return Err(Error::Contract(format!(
            "audit of {op}: {} analytic gradients for {} inputs",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut inputs = Vec::with_capacity(names.len());
    for ((name, a), num) in names.iter().zip(analytic).zip(numeric) {
        let mut max_abs = 0.0f64;
        let mut scale = 0.0f64;
        let mut skipped = 0;
        for ((&j, &nv), &ok) in num.coords.iter().zip(&num.values).zip(&num.smooth) {
            if !ok {
                skipped += 1;
                continue;
            }
            let av = f64::from(*a.data().get(j).ok_or_else(|| {
                Error::Contract(format!("audit of {op}: gradient for {name} has {} entries", a.len()))
            })?);
            max_abs = max_abs.max((av - nv).abs());
            scale = scale.max(av.abs()).max(nv.abs());
        }
        let max_rel = if scale < ZERO_SCALE { 0.0 } else { max_abs / scale };
        inputs.push(InputError {
            name: name.clone(),
            max_rel,
            max_abs,
            coords: num.coords.len(),
            skipped,
        });
    }
    let total: usize = inputs.iter().map(|e| e.coords).sum();
    let skipped: usize = inputs.iter().map(|e| e.skipped).sum();
    let pass = inputs.iter().all(|e| e.max_rel <= cfg.tol) && skipped as f64 <= cfg.max_skipped * total as f64;
    Ok(GradReport {
        op: op.to_string(),
        inputs,
        tol: cfg.tol,
        pass,
    })
}

/// Audits `op` at `inputs` against a seeded random projection of its output.
pub fn finite_diff_audit<O: DiffOp>(
    op: &O,
    inputs: &[Tensor<f32>],
    cfg: &AuditConfig,
    seed: u64,
) -> Result<GradReport> {
    let name = op.name();
    let out = op.forward(inputs)?;
    ensure_finite(out.max_abs().as_f64(), &name, "forward")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0fa_0d17);
    let proj: Tensor<f32> = normal(out.shape(), 1.0, &mut rng);
    let analytic = op.adjoint(inputs, &out, &proj)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Contract(format!(
            "{name}: adjoint returned {} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    for (a, x) in analytic.iter().zip(inputs) {
        if a.shape() != x.shape() {
            return Err(Error::shape("adjoint", a.shape(), x.shape()));
        }
    }
    let proj64 = proj.cast::<f64>();
    let x64: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let numeric = numeric_gradients(
        &x64,
        |xs| {
            let y = op.forward(xs)?;
            ensure_finite(dot(&y, &proj64), &name, "forward")
        },
        cfg,
        &mut rng,
    )?;
    compare(&name, &op.input_names(inputs.len()), &analytic, &numeric, cfg)
}

// ---------------------------------------------------------------------------
// primitive ops

/// `f(x) = x²` elementwise.
pub struct Square;

impl DiffOp for Square {
    fn name(&self) -> String {
        "square".into()
    }
    fn forward<T: Real>(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(inputs[0].map(|v| v * v))
    }
    fn adjoint<T: Real>(&self, inputs: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let two = T::from_f64(2.0);
        Ok(vec![inputs[0].zip_map(up, "square", |x, g| two * x * g)?])
    }
}

pub struct MatMul;

impl DiffOp for MatMul {
    fn name(&self) -> String {
        "matmul".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        vec!["A".into(), "B".into()]
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        matmul(&x[0], &x[1])
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (da, db) = matmul_backward(&x[0], &x[1], up)?;
        Ok(vec![da, db])
    }
}

pub struct Softmax;

impl DiffOp for Softmax {
    fn name(&self) -> String {
        "softmax_rows".into()
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        softmax_rows(&x[0])
    }
    fn adjoint<T: Real>(&self, _: &[Tensor<T>], y: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![softmax_rows_backward(y, up)?])
    }
}

pub struct Gelu;

impl DiffOp for Gelu {
    fn name(&self) -> String {
        "gelu".into()
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(gelu(&x[0]))
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![gelu_backward(&x[0], up)?])
    }
}

pub struct LayerNorm;

impl DiffOp for LayerNorm {
    fn name(&self) -> String {
        "layer_norm".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        vec!["X".into(), "gamma".into(), "beta".into()]
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(layer_norm(&x[0], &x[1], &x[2], LN_EPS)?.0)
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, cache) = layer_norm(&x[0], &x[1], &x[2], LN_EPS)?;
        let (dx, dg, db) = layer_norm_backward(&cache, &x[1], up)?;
        Ok(vec![dx, dg, db])
    }
}

pub struct CrossEntropy {
    pub target: usize,
    pub smoothing: f64,
}

impl DiffOp for CrossEntropy {
    fn name(&self) -> String {
        "cross_entropy".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        vec!["logits".into()]
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(
            cross_entropy_smoothed(&x[0], self.target, self.smoothing)?.0,
        ))
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, g) = cross_entropy_smoothed(&x[0], self.target, self.smoothing)?;
        Ok(vec![g.scale(up.data()[0])])
    }
}

pub struct Bilinear;

impl DiffOp for Bilinear {
    fn name(&self) -> String {
        "bilinear_sample".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        vec!["F".into(), "p".into()]
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        bilinear_sample(&x[0], &x[1])
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (df, dp) = bilinear_backward(&x[0], &x[1], up)?;
        Ok(vec![df, dp])
    }
}

pub struct Positional {
    pub spec: GridSpec,
}

impl DiffOp for Positional {
    fn name(&self) -> String {
        "positional_embed".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        vec!["p".into(), "W".into()]
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        positional_embed(&x[0], &x[1], &self.spec)
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (dp, dw) = positional_embed_backward(&x[0], &x[1], &self.spec, up)?;
        Ok(vec![dp, dw])
    }
}

pub struct Offsets;

impl DiffOp for Offsets {
    fn name(&self) -> String {
        "predict_offsets".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        vec!["T".into(), "M".into()]
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        predict_offsets(&x[0], &x[1], 1, 2)
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (dt, dm) = predict_offsets_backward(&x[0], &x[1], up)?;
        Ok(vec![dt, dm])
    }
}

pub struct Attention;

impl DiffOp for Attention {
    fn name(&self) -> String {
        "attention".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        vec!["Q".into(), "K".into(), "V".into()]
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(attention(&x[0], &x[1], &x[2])?.0)
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, cache) = attention(&x[0], &x[1], &x[2])?;
        let (dq, dk, dv) = attention_backward(&x[0], &x[1], &x[2], &cache, up)?;
        Ok(vec![dq, dk, dv])
    }
}

pub struct Relu;

impl DiffOp for Relu {
    fn name(&self) -> String {
        "relu".into()
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(relu(&x[..1]).remove(0))
    }
    fn adjoint<T: Real>(&self, _: &[Tensor<T>], y: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        relu_backward(std::slice::from_ref(y), std::slice::from_ref(up))
    }
}

pub struct MaxPool;

impl DiffOp for MaxPool {
    fn name(&self) -> String {
        "max_pool".into()
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(max_pool(&x[..1])?.0.remove(0))
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, cache) = max_pool(&x[..1])?;
        Ok(max_pool_backward(&cache, std::slice::from_ref(up)))
    }
}

// ---------------------------------------------------------------------------
// module ops: input 0 is the activation, the rest are module parameters in
// visitation order

fn loaded<T: Real, P: Params<T>>(mut module: P, params: &[Tensor<T>]) -> Result<P> {
    module.assign(params)?;
    module.zero_grads();
    Ok(module)
}

fn with_param_names<T: Real, P: Params<T>>(first: &str, module: &P) -> Vec<String> {
    let mut names = vec![first.to_string()];
    names.extend(module.names());
    names
}

fn prepend<T>(first: Tensor<T>, mut rest: Vec<Tensor<T>>) -> Vec<Tensor<T>> {
    rest.insert(0, first);
    rest
}

pub struct Mha {
    pub dim: usize,
    pub heads: usize,
}

impl Mha {
    fn module<T: Real>(&self, p: &[Tensor<T>]) -> Result<AttentionParams<T>> {
        loaded(AttentionParams::zeros(self.dim, self.heads)?, p)
    }
}

impl DiffOp for Mha {
    fn name(&self) -> String {
        "mha".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        with_param_names::<f32, _>("Z", &AttentionParams::zeros(self.dim, self.heads).expect("valid dims"))
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(mha(&x[0], &self.module(&x[1..])?)?.0)
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut p = self.module(&x[1..])?;
        let (_, cache) = mha(&x[0], &p)?;
        let dz = mha_backward(&mut p, &cache, up)?;
        Ok(prepend(dz, p.grads()))
    }
}

pub struct EncoderLayer {
    pub dim: usize,
    pub heads: usize,
}

impl EncoderLayer {
    fn module<T: Real>(&self, p: &[Tensor<T>]) -> Result<EncoderLayerParams<T>> {
        loaded(EncoderLayerParams::zeros(self.dim, self.heads, 0.0)?, p)
    }
}

impl DiffOp for EncoderLayer {
    fn name(&self) -> String {
        "encoder_layer".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        with_param_names::<f32, _>(
            "X",
            &EncoderLayerParams::zeros(self.dim, self.heads, 0.0).expect("valid dims"),
        )
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(encoder_layer(&x[0], &self.module(&x[1..])?, &mut Mode::Eval)?.0)
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut p = self.module(&x[1..])?;
        let (_, cache) = encoder_layer(&x[0], &p, &mut Mode::Eval)?;
        let dx = encoder_layer_backward(&mut p, &cache, up)?;
        Ok(prepend(dx, p.grads()))
    }
}

/// Class-token encoder stack. Inputs: tokens, cls token, then layer params.
pub struct Vtm {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
}

impl Vtm {
    fn layers<T: Real>(&self, p: &[Tensor<T>]) -> Result<Vec<EncoderLayerParams<T>>> {
        let mut layers = Vec::with_capacity(self.depth);
        let mut offset = 0;
        for _ in 0..self.depth {
            let proto = EncoderLayerParams::<T>::zeros(self.dim, self.heads, 0.0)?;
            let n = proto.names().len();
            layers.push(loaded(proto, &p[offset..offset + n])?);
            offset += n;
        }
        Ok(layers)
    }
}

impl DiffOp for Vtm {
    fn name(&self) -> String {
        "vtm".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        let mut names = vec!["tokens".to_string(), "cls_token".to_string()];
        for i in 0..self.depth {
            let layer = EncoderLayerParams::<f32>::zeros(self.dim, self.heads, 0.0).expect("valid dims");
            names.extend(layer.names().into_iter().map(|n| format!("layers.{i}.{n}")));
        }
        names
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(vtm(&x[0], &x[1], &self.layers(&x[2..])?, &mut Mode::Eval)?.0)
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut layers = self.layers(&x[2..])?;
        let mut cls = x[1].clone();
        cls.zero_grad();
        let (_, cache) = vtm(&x[0], &cls, &layers, &mut Mode::Eval)?;
        let dt = vtm_backward(&mut cls, &mut layers, &cache, up)?;
        let mut out = vec![dt, cls.grad_tensor()];
        for l in &layers {
            out.extend(l.grads());
        }
        Ok(out)
    }
}

pub struct ProgressiveSample {
    pub spec: GridSpec,
    pub dim: usize,
    pub heads: usize,
    pub iterations: usize,
    pub shared: bool,
}

impl ProgressiveSample {
    fn module<T: Real>(&self, p: &[Tensor<T>]) -> Result<SamplerParams<T>> {
        loaded(
            SamplerParams::zeros(self.dim, self.heads, self.iterations, 0.0, self.shared)?,
            p,
        )
    }
}

impl DiffOp for ProgressiveSample {
    fn name(&self) -> String {
        "progressive_sample".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        let p = SamplerParams::<f32>::zeros(self.dim, self.heads, self.iterations, 0.0, self.shared).expect("valid");
        with_param_names("F", &p)
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(progressive_sample(&x[0], &self.module(&x[1..])?, &self.spec, &mut Mode::Eval)?.0)
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut p = self.module(&x[1..])?;
        let (_, cache) = progressive_sample(&x[0], &p, &self.spec, &mut Mode::Eval)?;
        let df = progressive_sample_backward(&x[0], &mut p, &cache, up)?;
        Ok(prepend(df, p.grads()))
    }
}

pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    fn module<T: Real>(&self, p: &[Tensor<T>]) -> Result<Conv2d<T>> {
        loaded(
            Conv2d::zeros(self.cin, self.cout, self.kernel, self.stride, self.padding, true),
            p,
        )
    }
}

impl DiffOp for Conv {
    fn name(&self) -> String {
        "conv2d".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        vec!["X".into(), "weight".into(), "bias".into()]
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.module(&x[1..])?.forward_one(&x[0]).map(|(y, _)| y)
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut conv = self.module(&x[1..])?;
        let (_, cache) = conv.forward(&x[..1])?;
        let dx = conv.backward(&cache, std::slice::from_ref(up))?.remove(0);
        Ok(prepend(dx, conv.grads()))
    }
}

/// Channel normalization over a batch of two maps; batch statistics for
/// `NormKind::Batch`, plain affine otherwise.
pub struct Norm {
    pub kind: NormKind,
    pub channels: usize,
}

impl Norm {
    fn module<T: Real>(&self, p: &[Tensor<T>]) -> Result<ChannelNorm<T>> {
        loaded(ChannelNorm::new(self.kind, self.channels), p)
    }

    fn run<T: Real>(
        &self,
        norm: &ChannelNorm<T>,
        x: &[Tensor<T>],
    ) -> Result<(Vec<Tensor<T>>, crate::backbone::NormCache<T>)> {
        // batch statistics need training mode; nothing in it draws randomness
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mode = Mode::Train(&mut rng);
        norm.forward(&x[..2], &mode)
    }
}

fn stack<T: Real>(xs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut shape = vec![xs.len()];
    shape.extend_from_slice(xs[0].shape());
    Tensor::new(&shape, xs.iter().flat_map(|x| x.data().iter().copied()).collect())
}

fn unstack<T: Real>(x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let inner = &x.shape()[1..];
    let size: usize = inner.iter().product();
    x.data().chunks(size).map(|c| Tensor::new(inner, c.to_vec())).collect()
}

impl DiffOp for Norm {
    fn name(&self) -> String {
        match self.kind {
            NormKind::Batch => "batch_norm".into(),
            NormKind::Affine => "affine_norm".into(),
        }
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        vec!["X0".into(), "X1".into(), "gamma".into(), "beta".into()]
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        stack(&self.run(&self.module(&x[2..])?, x)?.0)
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut norm = self.module(&x[2..])?;
        let (_, cache) = self.run(&norm, x)?;
        let dx = norm.backward(&cache, &unstack(up)?)?;
        let mut out = dx;
        out.extend(norm.grads());
        Ok(out)
    }
}

pub struct Block {
    pub cin: usize,
    pub width: usize,
    pub cout: usize,
}

impl Block {
    fn module<T: Real>(&self, p: &[Tensor<T>]) -> Result<Bottleneck<T>> {
        loaded(
            Bottleneck::new::<ChaCha8Rng>(self.cin, self.width, self.cout, NormKind::Affine, None),
            p,
        )
    }
}

impl DiffOp for Block {
    fn name(&self) -> String {
        "residual_block".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        with_param_names::<f32, _>(
            "X",
            &Bottleneck::new::<ChaCha8Rng>(self.cin, self.width, self.cout, NormKind::Affine, None),
        )
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(self.module(&x[1..])?.forward(&x[..1], &Mode::Eval)?.0.remove(0))
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut block = self.module(&x[1..])?;
        let (_, cache) = block.forward(&x[..1], &Mode::Eval)?;
        let dx = block.backward(&cache, std::slice::from_ref(up))?.remove(0);
        Ok(prepend(dx, block.grads()))
    }
}

pub struct ExtractFeatures {
    pub config: BackboneConfig,
    pub dim: usize,
}

impl ExtractFeatures {
    fn module<T: Real>(&self, p: &[Tensor<T>]) -> Result<Backbone<T>> {
        loaded(Backbone::zeros(&self.config, self.dim)?, p)
    }
}

impl DiffOp for ExtractFeatures {
    fn name(&self) -> String {
        "extract_features".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        with_param_names::<f32, _>("image", &Backbone::zeros(&self.config, self.dim).expect("valid config"))
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(self.module(&x[1..])?.forward(&x[..1], &Mode::Eval)?.0.remove(0))
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut bb = self.module(&x[1..])?;
        let (_, cache) = bb.forward(&x[..1], &Mode::Eval)?;
        let dx = bb.backward(&cache, std::slice::from_ref(up))?.remove(0);
        Ok(prepend(dx, bb.grads()))
    }
}

/// Mean label-smoothed loss of the whole network on one image. Inputs: the
/// image, then every parameter.
pub struct ModelLoss {
    pub config: PsVitConfig,
    pub label: usize,
    pub smoothing: f64,
}

impl ModelLoss {
    fn module<T: Real>(&self, p: &[Tensor<T>]) -> Result<PsVit<T>> {
        loaded(PsVit::zeros(&self.config)?, p)
    }
}

impl DiffOp for ModelLoss {
    fn name(&self) -> String {
        "model".into()
    }
    fn input_names(&self, _: usize) -> Vec<String> {
        with_param_names::<f32, _>("image", &PsVit::zeros(&self.config).expect("valid config"))
    }
    fn forward<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        let pass = self.module(&x[1..])?.forward(&x[..1], &mut Mode::Eval)?;
        Ok(Tensor::scalar(pass.loss(&[self.label], self.smoothing)?.0))
    }
    fn adjoint<T: Real>(&self, x: &[Tensor<T>], _: &Tensor<T>, up: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut model = self.module(&x[1..])?;
        let pass = model.forward(&x[..1], &mut Mode::Eval)?;
        let (_, dlogits) = pass.loss(&[self.label], self.smoothing)?;
        let dlogits: Vec<_> = dlogits.iter().map(|g| g.scale(up.data()[0])).collect();
        let dx = model.backward(&pass, &dlogits)?.remove(0);
        Ok(prepend(dx, model.grads()))
    }
}

// ---------------------------------------------------------------------------
// random instances and the registry

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    normal(shape, 1.0, rng)
}

/// Values bounded away from zero (ReLU kink).
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let mag = Uniform::new(0.1f32, 1.5).expect("valid range");
    Tensor::from_fn(shape, |_| {
        let v = mag.sample(rng);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Locations inside `[0,h−1]×[0,w−1]` with fractional parts in `[0.1, 0.9]`.
pub fn fractional_locations(count: usize, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let frac = Uniform::new(0.1f32, 0.9).expect("valid range");
    let mut data = Vec::with_capacity(2 * count);
    for size in [height, width] {
        for _ in 0..count {
            let base = rng.random_range(0..size - 1) as f32;
            data.push(base + frac.sample(rng));
        }
    }
    Tensor::new(&[2, count], data).expect("finite locations")
}

fn random_params<T: Real, P: Params<T>>(module: &P, std: f64, rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
    let mut out = Vec::new();
    module.visit("", &mut |_, t, _| out.push(normal(t.shape(), std, rng)));
    out
}

/// Random scale and shift on every normalization, so no pre-activation
/// sits exactly on a ReLU kink (zero activations times bias-free weights
/// otherwise produce exact zeros).
pub fn jitter_norms<T: Real, P: Params<T>>(module: &mut P, rng: &mut ChaCha8Rng) {
    module.visit_mut("", &mut |name, t, kind| {
        if kind != ParamKind::Norm {
            return;
        }
        let offset = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        let noise: Tensor<T> = normal(t.shape(), 0.2, rng);
        *t = noise.map(|v| v + T::from_f64(offset));
    });
}

/// Toy model with random offset heads, so that locations after the first
/// iteration sit off the integer lattice where bilinear sampling has kinks.
pub fn audit_model(config: &PsVitConfig, seed: u64) -> Result<PsVit<f32>> {
    let mut model = PsVit::<f32>::build(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x0ff5e7));
    for head in &mut model.sampler.offset_heads {
        *head = normal(head.shape(), 0.1, &mut rng);
    }
    jitter_norms(&mut model, &mut rng);
    Ok(model)
}

/// Audit configuration used by the toy model: `C=16, n=2, N=2, N_v=2`, 16×16 input.
pub fn toy_model_config() -> PsVitConfig {
    PsVitConfig::toy()
}

/// One registered audit: name, tolerance and a runner over a seed.
pub struct AuditCase {
    pub name: &'static str,
    pub tol: f64,
    pub run: fn(u64, &AuditConfig) -> Result<GradReport>,
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn case_matmul(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let inputs = [randn(&[4, 3], &mut rng), randn(&[3, 5], &mut rng)];
    finite_diff_audit(&MatMul, &inputs, cfg, seed)
}

fn case_softmax(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    finite_diff_audit(&Softmax, &[randn(&[3, 4], &mut rng)], cfg, seed)
}

fn case_gelu(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let mut data = vec![-2.0, -0.5, 0.5, 2.0];
    data.extend(randn(&[8], &mut rng).into_data());
    finite_diff_audit(&Gelu, &[Tensor::new(&[12], data)?], cfg, seed)
}

fn case_layer_norm(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let inputs = [randn(&[3, 4], &mut rng), randn(&[4], &mut rng), randn(&[4], &mut rng)];
    finite_diff_audit(&LayerNorm, &inputs, cfg, seed)
}

fn case_cross_entropy(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let op = CrossEntropy {
        target: (seed % 5) as usize,
        smoothing: 0.1,
    };
    finite_diff_audit(&op, &[randn(&[5], &mut rng)], cfg, seed)
}

fn case_bilinear(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let inputs = [randn(&[3, 8, 8], &mut rng), fractional_locations(6, 8, 8, &mut rng)];
    finite_diff_audit(&Bilinear, &inputs, cfg, seed)
}

fn case_positional(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let spec = GridSpec::new(8, 8, 2)?;
    let inputs = [fractional_locations(4, 8, 8, &mut rng), randn(&[6, 2], &mut rng)];
    finite_diff_audit(&Positional { spec }, &inputs, cfg, seed)
}

fn case_offsets(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let inputs = [randn(&[6, 4], &mut rng), randn(&[2, 6], &mut rng)];
    finite_diff_audit(&Offsets, &inputs, cfg, seed)
}

fn case_attention(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let inputs = [
        randn(&[4, 5], &mut rng),
        randn(&[4, 5], &mut rng),
        randn(&[4, 5], &mut rng),
    ];
    finite_diff_audit(&Attention, &inputs, cfg, seed)
}

fn case_relu(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    finite_diff_audit(&Relu, &[away_from_zero(&[2, 4, 4], &mut rng)], cfg, seed)
}

fn case_max_pool(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    finite_diff_audit(&MaxPool, &[randn(&[2, 6, 6], &mut rng)], cfg, seed)
}

fn case_mha(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let op = Mha { dim: 8, heads: 2 };
    let z = randn(&[8, 5], &mut rng);
    let p = random_params(&AttentionParams::<f32>::zeros(8, 2)?, 0.4, &mut rng);
    finite_diff_audit(&op, &prepend(z, p), cfg, seed)
}

fn case_encoder(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let op = EncoderLayer { dim: 8, heads: 2 };
    let x = randn(&[8, 6], &mut rng);
    let p = random_params(&EncoderLayerParams::<f32>::zeros(8, 2, 0.0)?, 0.4, &mut rng);
    finite_diff_audit(&op, &prepend(x, p), cfg, seed)
}

fn case_conv(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let op = Conv {
        cin: 2,
        cout: 3,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let inputs = [
        randn(&[2, 5, 5], &mut rng),
        randn(&[3, 2, 3, 3], &mut rng),
        randn(&[3], &mut rng),
    ];
    finite_diff_audit(&op, &inputs, cfg, seed)
}

fn case_strided_conv(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let op = Conv {
        cin: 2,
        cout: 2,
        kernel: 7,
        stride: 2,
        padding: 3,
    };
    let inputs = [
        randn(&[2, 8, 8], &mut rng),
        randn(&[2, 2, 7, 7], &mut rng),
        randn(&[2], &mut rng),
    ];
    let mut report = finite_diff_audit(&op, &inputs, cfg, seed)?;
    report.op = "conv2d_strided".into();
    Ok(report)
}

fn case_norm(kind: NormKind, seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let op = Norm { kind, channels: 3 };
    let inputs = [
        randn(&[3, 3, 3], &mut rng),
        randn(&[3, 3, 3], &mut rng),
        randn(&[3], &mut rng),
        randn(&[3], &mut rng),
    ];
    finite_diff_audit(&op, &inputs, cfg, seed)
}

fn case_batch_norm(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    case_norm(NormKind::Batch, seed, cfg)
}

fn case_affine_norm(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    case_norm(NormKind::Affine, seed, cfg)
}

fn case_block(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let op = Block {
        cin: 4,
        width: 4,
        cout: 8,
    };
    let mut block = Bottleneck::<f32>::new(4, 4, 8, NormKind::Affine, Some(&mut rng));
    jitter_norms(&mut block, &mut rng);
    let x = randn(&[4, 5, 5], &mut rng);
    finite_diff_audit(&op, &prepend(x, block.flatten()), cfg, seed)
}

fn case_vtm(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let op = Vtm {
        dim: 8,
        heads: 2,
        depth: 2,
    };
    let mut inputs = vec![randn(&[8, 4], &mut rng), randn(&[8, 1], &mut rng)];
    for _ in 0..op.depth {
        inputs.extend(random_params(
            &EncoderLayerParams::<f32>::zeros(8, 2, 0.0)?,
            0.4,
            &mut rng,
        ));
    }
    finite_diff_audit(&op, &inputs, cfg, seed)
}

fn case_progressive(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let mut rng = rng_for(seed);
    let op = ProgressiveSample {
        spec: GridSpec::new(8, 8, 2)?,
        dim: 4,
        heads: 2,
        iterations: 3,
        shared: false,
    };
    let mut sampler = SamplerParams::<f32>::init(4, 2, 3, 0.0, false, &mut rng)?;
    for head in &mut sampler.offset_heads {
        *head = normal(head.shape(), 0.3, &mut rng);
    }
    sampler.pos_proj = normal(sampler.pos_proj.shape(), 0.5, &mut rng);
    let f = randn(&[4, 8, 8], &mut rng);
    finite_diff_audit(&op, &prepend(f, sampler.flatten()), cfg, seed)
}

/// Seed 0 audits every coordinate; later seeds of the expensive composed
/// audits check a random subset per input.
fn subsampled(seed: u64, cfg: &AuditConfig) -> AuditConfig {
    AuditConfig {
        max_coords: cfg.max_coords.or((seed != 0).then_some(SUBSET_COORDS)),
        ..*cfg
    }
}

fn case_features(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let cfg = &subsampled(seed, cfg);
    let mut rng = rng_for(seed);
    let op = ExtractFeatures {
        config: BackboneConfig::toy(),
        dim: 16,
    };
    let mut bb = Backbone::<f32>::init(&op.config, op.dim, &mut rng)?;
    jitter_norms(&mut bb, &mut rng);
    let image = randn(&[3, 16, 16], &mut rng);
    finite_diff_audit(&op, &prepend(image, bb.flatten()), cfg, seed)
}

fn case_model(seed: u64, cfg: &AuditConfig) -> Result<GradReport> {
    let cfg = &subsampled(seed, cfg);
    let config = toy_model_config();
    let model = audit_model(&config, seed)?;
    let mut rng = rng_for(seed ^ 0x1a9e);
    let image = randn(&[3, config.input_size, config.input_size], &mut rng);
    let op = ModelLoss {
        label: (seed as usize) % config.num_classes,
        config,
        smoothing: 0.1,
    };
    finite_diff_audit(&op, &prepend(image, model.flatten()), cfg, seed)
}

/// Every differentiable operation with its audit tolerance.
pub fn registry() -> Vec<AuditCase> {
    let op = |name, run| AuditCase { name, tol: OP_TOL, run };
    let composed = |name, run| AuditCase {
        name,
        tol: COMPOSED_TOL,
        run,
    };
    vec![
        op("matmul", case_matmul),
        op("softmax_rows", case_softmax),
        op("gelu", case_gelu),
        op("layer_norm", case_layer_norm),
        op("cross_entropy", case_cross_entropy),
        op("bilinear_sample", case_bilinear),
        op("positional_embed", case_positional),
        op("predict_offsets", case_offsets),
        op("attention", case_attention),
        op("mha", case_mha),
        op("encoder_layer", case_encoder),
        op("relu", case_relu),
        op("max_pool", case_max_pool),
        op("conv2d", case_conv),
        op("conv2d_strided", case_strided_conv),
        op("affine_norm", case_affine_norm),
        op("batch_norm", case_batch_norm),
        composed("residual_block", case_block),
        composed("vtm", case_vtm),
        composed("progressive_sample", case_progressive),
        composed("extract_features", case_features),
        composed("model", case_model),
    ]
}

pub fn find_case(name: &str) -> Option<AuditCase> {
    registry().into_iter().find(|c| c.name == name)
}

/// Runs `case` on each seed with its own tolerance.
pub fn run_case(case: &AuditCase, seeds: &[u64], h: f64) -> Result<Vec<GradReport>> {
    run_case_with_tol(case, seeds, h, case.tol)
}

pub fn run_case_with_tol(case: &AuditCase, seeds: &[u64], h: f64, tol: f64) -> Result<Vec<GradReport>> {
    let cfg = AuditConfig::new(h, tol);
    seeds.iter().map(|&s| (case.run)(s, &cfg)).collect()
}
