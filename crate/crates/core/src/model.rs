//! End-to-end network: feature extractor → progressive sampler → class-token
//! encoder stack → classifier, plus analytic parameter and FLOP accounting.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneConfig, STRIDE};
use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::mode::Mode;
use crate::ops::{cross_entropy_smoothed, layer_norm, layer_norm_backward, matmul, matmul_tn, LayerNormCache, LN_EPS};
use crate::params::{join, ParamKind, Params};
use crate::sampling::{progressive_sample, progressive_sample_backward, GridSpec, SamplerCache, SamplerParams};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::trajectory::TrajectoryLog;
use crate::transformer::{vtm, vtm_backward, EncoderLayerParams, LayerNormParams, VtmCache, INIT_STD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsVitConfig {
    /// Progressive-sampling iterations `N`.
    pub iterations: usize,
    /// Encoder layers after sampling `N_v`.
    pub depth: usize,
    /// Token dimension `C`.
    pub dim: usize,
    /// Attention heads `M`.
    pub heads: usize,
    /// Samples per axis `n`.
    pub samples: usize,
    pub share_weights: bool,
    pub num_classes: usize,
    /// Square input side in pixels.
    pub input_size: usize,
    pub dropout: f64,
    pub backbone: BackboneConfig,
}

impl PsVitConfig {
    pub fn ps_vit_ti() -> Self {
        Self {
            iterations: 4,
            depth: 8,
            dim: 192,
            heads: 3,
            samples: 14,
            share_weights: false,
            num_classes: 1000,
            input_size: 224,
            dropout: 0.1,
            backbone: BackboneConfig::resnet_stage1(),
        }
    }

    pub fn ps_vit_b() -> Self {
        Self {
            depth: 10,
            dim: 384,
            heads: 6,
            ..Self::ps_vit_ti()
        }
    }

    /// Desk-scale configuration used by tests and the overfit fixture.
    pub fn toy() -> Self {
        Self {
            iterations: 2,
            depth: 2,
            dim: 16,
            heads: 2,
            samples: 2,
            share_weights: false,
            num_classes: 3,
            input_size: 16,
            dropout: 0.0,
            backbone: BackboneConfig::toy(),
        }
    }

    pub const PRESETS: [&'static str; 3] = ["ps-vit-ti", "ps-vit-b", "toy"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ps-vit-ti" => Ok(Self::ps_vit_ti()),
            "ps-vit-b" => Ok(Self::ps_vit_b()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {:?})",
                Self::PRESETS
            ))),
        }
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return err(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.samples == 0 {
            return err("samples per axis must be >= 1".into());
        }
        if self.iterations == 0 {
            return err("sampling iterations must be >= 1".into());
        }
        if self.num_classes == 0 {
            return err("num_classes must be >= 1".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(STRIDE) {
            return err(format!("input size {} is not divisible by {STRIDE}", self.input_size));
        }
        if self.samples > self.feature_size() {
            return err(format!(
                "{} samples per axis exceed the {}x{} feature map",
                self.samples,
                self.feature_size(),
                self.feature_size()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        self.backbone.validate()
    }
}

// ---------------------------------------------------------------------------
// classifier head

/// Layer norm then linear map on the refined class token.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T = f32> {
    pub norm: LayerNormParams<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Params<T> for Head<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.norm.visit(&join(prefix, "norm"), f);
        f(&join(prefix, "weight"), &self.weight, ParamKind::Weight);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Bias);
    }
}

// ---------------------------------------------------------------------------
// parameter store

/// Named tensors of one model: trainable parameters plus non-trainable
/// buffers (batch-norm running statistics). Shared parameters appear once.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub config: PsVitConfig,
    pub params: IndexMap<String, Tensor<f32>>,
    pub buffers: IndexMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

// ---------------------------------------------------------------------------
// model

#[derive(Clone, Debug, PartialEq)]
pub struct PsVit<T = f32> {
    pub config: PsVitConfig,
    pub backbone: Backbone<T>,
    pub sampler: SamplerParams<T>,
    pub vtm: Vec<EncoderLayerParams<T>>,
    /// `C×1`
    pub cls_token: Tensor<T>,
    pub head: Head<T>,
}

#[derive(Clone, Debug)]
struct ImageCache<T> {
    sampler: SamplerCache<T>,
    vtm: VtmCache<T>,
    head_ln: LayerNormCache<T>,
    head_in: Tensor<T>,
    tokens_out_shape: [usize; 2],
}

/// Result of a forward pass over a batch, with everything the backward
/// pass needs.
#[derive(Clone, Debug)]
pub struct ForwardPass<T = f32> {
    pub logits: Vec<Tensor<T>>,
    pub features: Vec<Tensor<T>>,
    backbone: BackboneCache<T>,
    images: Vec<ImageCache<T>>,
}

impl<T: Real> ForwardPass<T> {
    pub fn trajectories(&self) -> Vec<TrajectoryLog> {
        self.images.iter().map(|c| c.sampler.trajectory()).collect()
    }

    /// Mean label-smoothed cross-entropy and its gradient wrt each logit vector.
    pub fn loss(&self, labels: &[usize], smoothing: f64) -> Result<(T, Vec<Tensor<T>>)> {
        if labels.len() != self.logits.len() {
            return Err(Error::Contract(format!(
                "{} labels for a batch of {}",
                labels.len(),
                self.logits.len()
            )));
        }
        let scale = T::from_f64(1.0 / labels.len() as f64);
        let mut total = T::zero();
        let mut grads = Vec::with_capacity(labels.len());
        for (logits, &y) in self.logits.iter().zip(labels) {
            let (l, g) = cross_entropy_smoothed(logits, y, smoothing)?;
            total = total + l;
            grads.push(g.scale(scale));
        }
        Ok((total * scale, grads))
    }
}

impl<T: Real> PsVit<T> {
    /// Deterministic construction under `seed`.
    pub fn build(config: &PsVitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(&config.backbone, config.dim, &mut rng)?;
        let sampler = SamplerParams::init(
            config.dim,
            config.heads,
            config.iterations,
            config.dropout,
            config.share_weights,
            &mut rng,
        )?;
        let vtm = (0..config.depth)
            .map(|_| EncoderLayerParams::init(config.dim, config.heads, config.dropout, &mut rng))
            .collect::<Result<_>>()?;
        let cls_token = trunc_normal(&[config.dim, 1], INIT_STD, &mut rng);
        let head = Head {
            norm: LayerNormParams::new(config.dim),
            weight: trunc_normal(&[config.num_classes, config.dim], INIT_STD, &mut rng),
            bias: Tensor::zeros(&[config.num_classes]),
        };
        Ok(Self {
            config: config.clone(),
            backbone,
            sampler,
            vtm,
            cls_token,
            head,
        })
    }

    /// All-zero parameters with the right structure (for loading).
    pub fn zeros(config: &PsVitConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            backbone: Backbone::zeros(&config.backbone, config.dim)?,
            sampler: SamplerParams::zeros(
                config.dim,
                config.heads,
                config.iterations,
                config.dropout,
                config.share_weights,
            )?,
            vtm: (0..config.depth)
                .map(|_| EncoderLayerParams::zeros(config.dim, config.heads, config.dropout))
                .collect::<Result<_>>()?,
            cls_token: Tensor::zeros(&[config.dim, 1]),
            head: Head {
                norm: LayerNormParams::new(config.dim),
                weight: Tensor::zeros(&[config.num_classes, config.dim]),
                bias: Tensor::zeros(&[config.num_classes]),
            },
        })
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> Result<PsVit<U>> {
        let mut out = PsVit::<U>::zeros(&self.config)?;
        out.assign(&self.flatten())?;
        let mut bufs = Vec::new();
        self.backbone.visit_buffers("", &mut |_, t| bufs.push(t.cast::<U>()));
        let mut i = 0;
        out.backbone.visit_buffers_mut("", &mut |_, t| {
            *t = bufs[i].clone();
            i += 1;
        });
        Ok(out)
    }

    pub fn grid_spec(&self, image_h: usize, image_w: usize) -> Result<GridSpec> {
        let (h, w) = Backbone::<T>::feature_size(image_h, image_w)?;
        GridSpec::new(h, w, self.config.samples)
    }

    /// Makes every sampling iteration alias the first one's encoder layer
    /// and offset head.
    pub fn tie_weights(&mut self) -> Result<()> {
        self.sampler.tie()?;
        self.config.share_weights = true;
        Ok(())
    }

    pub fn forward(&self, images: &[Tensor<T>], mode: &mut Mode<'_>) -> Result<ForwardPass<T>> {
        if images.is_empty() {
            return Err(Error::Contract("empty image batch".into()));
        }
        let (features, backbone) = self.backbone.forward(images, mode)?;
        let mut logits = Vec::with_capacity(images.len());
        let mut caches = Vec::with_capacity(images.len());
        for (img, feat) in images.iter().zip(&features) {
            let spec = self.grid_spec(img.shape()[1], img.shape()[2])?;
            let (tokens, sampler) = progressive_sample(feat, &self.sampler, &spec, mode)?;
            let (refined, vtm_cache) = vtm(&tokens, &self.cls_token, &self.vtm, mode)?;
            let (_, total) = refined.dims2()?;
            let cls: Vec<T> = (0..self.config.dim).map(|ch| refined.data()[ch * total]).collect();
            let cls_row = Tensor::from_op("head", &[1, self.config.dim], cls);
            let (head_in, head_ln) = layer_norm(&cls_row, &self.head.norm.gamma, &self.head.norm.beta, LN_EPS)?;
            let z = matmul(&self.head.weight, &head_in.transpose()?)?;
            let z = z.add(&self.head.bias.clone().reshape(&[self.config.num_classes, 1])?)?;
            logits.push(z.reshape(&[self.config.num_classes])?);
            caches.push(ImageCache {
                sampler,
                vtm: vtm_cache,
                head_ln,
                head_in,
                tokens_out_shape: [self.config.dim, total],
            });
        }
        Ok(ForwardPass {
            logits,
            features,
            backbone,
            images: caches,
        })
    }

    /// Logits only, in evaluation mode.
    pub fn predict(&self, images: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        Ok(self.forward(images, &mut Mode::Eval)?.logits)
    }

    /// Accumulates parameter gradients for upstream `dlogits`; returns the
    /// gradients wrt the input images.
    pub fn backward(&mut self, pass: &ForwardPass<T>, dlogits: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let k = self.config.num_classes;
        let dim = self.config.dim;
        let mut dfeatures = Vec::with_capacity(dlogits.len());
        for ((g, cache), feat) in dlogits.iter().zip(&pass.images).zip(&pass.features) {
            let g = g.clone().reshape(&[k, 1])?;
            self.head.bias.accumulate_grad(&g.clone().reshape(&[k])?)?;
            self.head.weight.accumulate_grad(&matmul(&g, &cache.head_in)?)?;
            let dhead_in = matmul_tn(&g, &self.head.weight)?;
            let (dcls, dgamma, dbeta) = layer_norm_backward(&cache.head_ln, &self.head.norm.gamma, &dhead_in)?;
            self.head.norm.gamma.accumulate_grad(&dgamma)?;
            self.head.norm.beta.accumulate_grad(&dbeta)?;

            let [_, total] = cache.tokens_out_shape;
            let mut drefined = Tensor::zeros(&[dim, total]);
            for ch in 0..dim {
                drefined.data_mut()[ch * total] = dcls.data()[ch];
            }
            let dtokens = vtm_backward(&mut self.cls_token, &mut self.vtm, &cache.vtm, &drefined)?;
            dfeatures.push(progressive_sample_backward(
                feat,
                &mut self.sampler,
                &cache.sampler,
                &dtokens,
            )?);
        }
        self.backbone.backward(&pass.backbone, &dfeatures)
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn commit_stats(&mut self, pass: &ForwardPass<T>) {
        self.backbone.commit(&pass.backbone);
    }

    pub fn param_store(&self) -> ParamStore {
        let mut params = IndexMap::new();
        self.visit("", &mut |name, t, _| {
            let mut t = t.cast::<f32>();
            t.clear_grad();
            params.insert(name.to_string(), t);
        });
        let mut buffers = IndexMap::new();
        self.backbone.visit_buffers("backbone", &mut |name, t| {
            buffers.insert(name.to_string(), t.cast::<f32>());
        });
        ParamStore {
            config: self.config.clone(),
            params,
            buffers,
        }
    }

    /// Copies tensors from `store`. Strict loading requires the exact same
    /// set of paths and shapes and lists every offender otherwise.
    pub fn load_store(&mut self, store: &ParamStore, strict: bool) -> Result<()> {
        let mut offenders = Vec::new();
        let mut seen = 0usize;
        self.visit("", &mut |name, t, _| match store.params.get(name) {
            Some(s) if s.shape() == t.shape() => seen += 1,
            Some(s) => offenders.push(format!("{name}: shape {:?} != {:?}", s.shape(), t.shape())),
            None => offenders.push(format!("{name}: missing from checkpoint")),
        });
        let mut bufs_expected = Vec::new();
        self.backbone.visit_buffers("backbone", &mut |name, t| {
            bufs_expected.push((name.to_string(), t.shape().to_vec()))
        });
        for (name, shape) in &bufs_expected {
            match store.buffers.get(name) {
                Some(s) if s.shape() == &shape[..] => {}
                Some(s) => offenders.push(format!("{name}: shape {:?} != {:?}", s.shape(), shape)),
                None => offenders.push(format!("{name}: missing from checkpoint")),
            }
        }
        if seen != store.params.len() {
            let own: std::collections::HashSet<String> = self.names().into_iter().collect();
            for name in store.params.keys().filter(|n| !own.contains(*n)) {
                offenders.push(format!("{name}: unexpected parameter"));
            }
        }
        for name in store.buffers.keys() {
            if !bufs_expected.iter().any(|(n, _)| n == name) {
                offenders.push(format!("{name}: unexpected buffer"));
            }
        }
        if strict && !offenders.is_empty() {
            return Err(Error::ParamMismatch(offenders));
        }
        self.visit_mut("", &mut |name, t, _| {
            if let Some(s) = store.params.get(name).filter(|s| s.shape() == t.shape()) {
                for (d, &v) in t.data_mut().iter_mut().zip(s.data()) {
                    *d = T::from_f64(f64::from(v));
                }
            }
        });
        self.backbone.visit_buffers_mut("backbone", &mut |name, t| {
            if let Some(s) = store.buffers.get(name).filter(|s| s.shape() == t.shape()) {
                for (d, &v) in t.data_mut().iter_mut().zip(s.data()) {
                    *d = T::from_f64(f64::from(v));
                }
            }
        });
        Ok(())
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut model = Self::zeros(&store.config)?;
        model.load_store(store, true)?;
        Ok(model)
    }
}

impl<T: Real> Params<T> for PsVit<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.sampler.visit(&join(prefix, "sampler"), f);
        for (i, layer) in self.vtm.iter().enumerate() {
            layer.visit(&join(prefix, &format!("vtm.layers.{i}")), f);
        }
        f(&join(prefix, "cls_token"), &self.cls_token, ParamKind::Token);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.sampler.visit_mut(&join(prefix, "sampler"), f);
        for (i, layer) in self.vtm.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("vtm.layers.{i}")), f);
        }
        f(&join(prefix, "cls_token"), &mut self.cls_token, ParamKind::Token);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

// ---------------------------------------------------------------------------
// cost accounting

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub module: String,
    pub params: u64,
    pub flops: u64,
}

/// Parameter and FLOP totals with a per-module breakdown. One FLOP is one
/// multiply-accumulate; normalization, activations, softmax and pooling
/// are not counted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub breakdown: Vec<CostEntry>,
}

impl CostReport {
    pub fn entry(&self, module: &str) -> Option<&CostEntry> {
        self.breakdown.iter().find(|e| e.module == module)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,params,flops\n");
        for e in &self.breakdown {
            s.push_str(&format!("{},{},{}\n", e.module, e.params, e.flops));
        }
        s.push_str(&format!("total,{},{}\n", self.params, self.flops));
        s
    }
}

fn encoder_layer_params(c: u64) -> u64 {
    // qkv + output (4C²), FFN (6C² + 3C + C), two layer norms (4C)
    10 * c * c + 8 * c
}

fn encoder_layer_flops(c: u64, len: u64) -> u64 {
    // projections 4LC², scores + weighted sum 2L²C, FFN 6LC²
    10 * len * c * c + 2 * len * len * c
}

fn conv_cost(cin: u64, cout: u64, k: u64, out_h: u64, out_w: u64, bias: bool) -> (u64, u64) {
    let weights = cin * cout * k * k;
    (weights + if bias { cout } else { 0 }, weights * out_h * out_w)
}

fn backbone_cost(config: &PsVitConfig) -> (u64, u64) {
    let b = &config.backbone;
    let (stem_side, feat_side) = ((config.input_size / 2) as u64, config.feature_size() as u64);
    let (cin, stem, width, out) = (
        b.in_channels as u64,
        b.stem_channels as u64,
        b.bottleneck_width as u64,
        b.block_channels as u64,
    );
    let plane = |k, ci, co, side, bias| conv_cost(ci, co, k, side, side, bias);
    let mut params = 0;
    let mut flops = 0;
    let mut add = |(p, f): (u64, u64)| {
        params += p;
        flops += f;
    };
    add(plane(7, cin, stem, stem_side, false));
    add((2 * stem, 0));
    let mut ch = stem;
    for _ in 0..b.blocks {
        add(plane(1, ch, width, feat_side, false));
        add(plane(3, width, width, feat_side, false));
        add(plane(1, width, out, feat_side, false));
        add((2 * width + 2 * width + 2 * out, 0));
        if ch != out {
            add(plane(1, ch, out, feat_side, false));
            add((2 * out, 0));
        }
        ch = out;
    }
    add(plane(1, ch, config.dim as u64, feat_side, true));
    (params, flops)
}

/// Analytic parameter and FLOP accounting for `config`.
pub fn cost_report(config: &PsVitConfig) -> Result<CostReport> {
    config.validate()?;
    let c = config.dim as u64;
    let iters = config.iterations as u64;
    let tokens = (config.samples * config.samples) as u64;
    let (n_layers, n_heads) = SamplerParams::<f32>::counts(config.iterations, config.share_weights);

    let (bb_params, bb_flops) = backbone_cost(config);
    let sampler_params = 2 * c + n_layers as u64 * encoder_layer_params(c) + n_heads as u64 * 2 * c;
    // per iteration: bilinear (4 taps), positional projection, encoder layer;
    // offsets for all but the last iteration
    let sampler_flops =
        iters * (4 * c * tokens + 2 * c * tokens + encoder_layer_flops(c, tokens)) + (iters - 1) * 2 * c * tokens;
    let depth = config.depth as u64;
    let vtm_params = depth * encoder_layer_params(c);
    let vtm_flops = depth * encoder_layer_flops(c, tokens + 1);
    let k = config.num_classes as u64;
    let head_params = 2 * c + k * c + k;

    let breakdown = vec![
        CostEntry {
            module: "backbone".into(),
            params: bb_params,
            flops: bb_flops,
        },
        CostEntry {
            module: "sampler".into(),
            params: sampler_params,
            flops: sampler_flops,
        },
        CostEntry {
            module: "vtm".into(),
            params: vtm_params,
            flops: vtm_flops,
        },
        CostEntry {
            module: "cls_token".into(),
            params: c,
            flops: 0,
        },
        CostEntry {
            module: "head".into(),
            params: head_params,
            flops: k * c,
        },
    ];
    Ok(CostReport {
        params: breakdown.iter().map(|e| e.params).sum(),
        flops: breakdown.iter().map(|e| e.flops).sum(),
        breakdown,
    })
}

pub fn count_params(config: &PsVitConfig) -> Result<u64> {
    Ok(cost_report(config)?.params)
}

pub fn count_flops(config: &PsVitConfig) -> Result<u64> {
    Ok(cost_report(config)?.flops)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_reported_hyperparameters() {
        let ti = PsVitConfig::ps_vit_ti();
        assert_eq!(
            (ti.iterations, ti.depth, ti.dim, ti.heads, ti.samples),
            (4, 8, 192, 3, 14)
        );
        let b = PsVitConfig::ps_vit_b();
        assert_eq!((b.iterations, b.depth, b.dim, b.heads, b.samples), (4, 10, 384, 6, 14));
        assert!(PsVitConfig::preset("ps-vit-s").is_err());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = PsVitConfig::toy();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = PsVitConfig::toy();
        c.input_size = 18;
        assert!(c.validate().is_err());
        let mut c = PsVitConfig::toy();
        c.samples = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn builds_are_deterministic() {
        let a = PsVit::<f32>::build(&PsVitConfig::toy(), 9).unwrap();
        let b = PsVit::<f32>::build(&PsVitConfig::toy(), 9).unwrap();
        assert_eq!(a.param_store(), b.param_store());
        let c = PsVit::<f32>::build(&PsVitConfig::toy(), 10).unwrap();
        assert_ne!(a.param_store(), c.param_store());
    }

    #[test]
    fn analytic_count_matches_store_for_toy_variants() {
        for share in [false, true] {
            for iterations in [1, 2, 3] {
                let mut cfg = PsVitConfig::toy();
                cfg.share_weights = share;
                cfg.iterations = iterations;
                let model = PsVit::<f32>::build(&cfg, 0).unwrap();
                assert_eq!(model.param_store().count() as u64, count_params(&cfg).unwrap());
            }
        }
    }

    #[test]
    fn report_totals_equal_breakdown() {
        let r = cost_report(&PsVitConfig::ps_vit_b()).unwrap();
        assert_eq!(r.params, r.breakdown.iter().map(|e| e.params).sum::<u64>());
        assert_eq!(r.flops, r.breakdown.iter().map(|e| e.flops).sum::<u64>());
        assert!(r.to_csv().ends_with(&format!("total,{},{}\n", r.params, r.flops)));
    }
}
