//! Python bindings: configurations, cost reports, the model (build, predict,
//! trajectories, checkpoints, training on the synthetic fixture) and the
//! gradient audits.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use psvit::data::{synthetic_blobs, Dataset};
use psvit::sampling::{bilinear_sample as sample, init_grid as grid, GridSpec};
use psvit::train::{evaluate, train, TrainConfig};
use psvit::{checkpoint, gradcheck, Error, Mode, Params, PsVit, PsVitConfig, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Dataset(_) | Error::Format(_) | Error::Shape { .. } | Error::DataLength { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Model configuration.
#[pyclass(name = "Config", module = "psvit_py", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: PsVitConfig,
}

#[pymethods]
impl PyConfig {
    /// `ps-vit-ti`, `ps-vit-b` or `toy`, with optional overrides.
    #[new]
    #[pyo3(signature = (preset = "toy", *, samples = None, iterations = None, depth = None, dim = None, heads = None, num_classes = None, share_weights = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        preset: &str,
        samples: Option<usize>,
        iterations: Option<usize>,
        depth: Option<usize>,
        dim: Option<usize>,
        heads: Option<usize>,
        num_classes: Option<usize>,
        share_weights: Option<bool>,
    ) -> PyResult<Self> {
        let mut c = PsVitConfig::preset(preset).map_err(to_py)?;
        c.samples = samples.unwrap_or(c.samples);
        c.iterations = iterations.unwrap_or(c.iterations);
        c.depth = depth.unwrap_or(c.depth);
        c.dim = dim.unwrap_or(c.dim);
        c.heads = heads.unwrap_or(c.heads);
        c.num_classes = num_classes.unwrap_or(c.num_classes);
        c.share_weights = share_weights.unwrap_or(c.share_weights);
        c.validate().map_err(to_py)?;
        Ok(Self { inner: c })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: PsVitConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }

    #[getter]
    fn samples(&self) -> usize {
        self.inner.samples
    }
    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }
    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }
    #[getter]
    fn heads(&self) -> usize {
        self.inner.heads
    }
    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }
    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size
    }
    #[getter]
    fn share_weights(&self) -> bool {
        self.inner.share_weights
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "Config(dim={}, heads={}, samples={}, iterations={}, depth={}, num_classes={}, input_size={}, share_weights={})",
            c.dim, c.heads, c.samples, c.iterations, c.depth, c.num_classes, c.input_size, c.share_weights
        )
    }
}

/// `{"params", "flops", "breakdown": [{"module", "params", "flops"}]}`.
#[pyfunction]
fn cost_report<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    let r = psvit::cost_report(&config.inner).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("params", r.params)?;
    d.set_item("flops", r.flops)?;
    let rows = r
        .breakdown
        .iter()
        .map(|e| {
            let row = PyDict::new(py);
            row.set_item("module", &e.module)?;
            row.set_item("params", e.params)?;
            row.set_item("flops", e.flops)?;
            Ok(row)
        })
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("breakdown", rows)?;
    Ok(d)
}

fn image_tensors(images: Vec<Vec<f32>>, size: usize) -> PyResult<Vec<Tensor<f32>>> {
    images
        .into_iter()
        .map(|px| Tensor::new(&[3, size, size], px).map_err(to_py))
        .collect()
}

fn synthetic(samples: usize, size: usize, seed: u64) -> PyResult<Dataset> {
    synthetic_blobs(samples, size, seed).map_err(to_py)
}

/// `[image][iteration][point] -> (y, x)`.
type Trajectories = Vec<Vec<Vec<(f32, f32)>>>;

/// Classifier with `f32` parameters. Images are flat `3·S·S` lists in
/// channel-major order, `S` being the configured input size.
#[pyclass(name = "Model", module = "psvit_py")]
pub struct PyModel {
    inner: PsVit<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: PsVit::build(&config.inner, seed).map_err(to_py)?,
        })
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.names()
    }

    /// Logits per image (evaluation mode).
    fn predict(&self, images: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let xs = image_tensors(images, self.inner.config.input_size)?;
        let logits = self.inner.predict(&xs).map_err(to_py)?;
        Ok(logits.into_iter().map(Tensor::into_data).collect())
    }

    /// Per image, the sampled `(y, x)` of every point at every iteration:
    /// `result[image][iteration][point]`.
    fn trajectories(&self, images: Vec<Vec<f32>>) -> PyResult<Trajectories> {
        let xs = image_tensors(images, self.inner.config.input_size)?;
        let pass = self.inner.forward(&xs, &mut Mode::Eval).map_err(to_py)?;
        Ok(pass
            .trajectories()
            .iter()
            .map(|log| {
                (1..=log.iterations())
                    .map(|t| (0..log.spec.num_points()).map(|i| log.point(t, i)).collect())
                    .collect()
            })
            .collect())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.inner.param_store(), path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let store = checkpoint::load(path).map_err(to_py)?;
        Ok(Self {
            inner: PsVit::from_store(&store).map_err(to_py)?,
        })
    }

    /// Trains on the synthetic two-class fixture; returns per-epoch
    /// `{"epoch", "loss", "accuracy", "lr"}` dictionaries.
    #[pyo3(signature = (epochs = 30, samples = 64, seed = 0, lr = 5e-4, batch_size = 32, target_accuracy = None))]
    #[allow(clippy::too_many_arguments)]
    fn train_synthetic<'py>(
        &mut self,
        py: Python<'py>,
        epochs: usize,
        samples: usize,
        seed: u64,
        lr: f64,
        batch_size: usize,
        target_accuracy: Option<f64>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let ds = synthetic(samples, self.inner.config.input_size, seed)?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            base_lr: lr,
            seed,
            target_accuracy,
            ..Default::default()
        };
        let metrics = train(&mut self.inner, &ds, &cfg, |_, _| Ok(())).map_err(to_py)?;
        metrics
            .iter()
            .map(|m| {
                let d = PyDict::new(py);
                d.set_item("epoch", m.epoch)?;
                d.set_item("loss", m.loss)?;
                d.set_item("accuracy", m.accuracy)?;
                d.set_item("lr", m.lr)?;
                Ok(d)
            })
            .collect()
    }

    /// `(top1, top5)` on the synthetic fixture drawn with `seed`.
    #[pyo3(signature = (samples = 64, seed = 0))]
    fn evaluate_synthetic(&self, samples: usize, seed: u64) -> PyResult<(f64, f64)> {
        let ds = synthetic(samples, self.inner.config.input_size, seed)?;
        let r = evaluate(&self.inner, &ds, 32).map_err(to_py)?;
        Ok((r.top1, r.top5))
    }
}

/// Synthetic two-class images (flat lists) and labels.
#[pyfunction]
#[pyo3(signature = (samples = 64, size = 16, seed = 0))]
fn synthetic_dataset(samples: usize, size: usize, seed: u64) -> PyResult<(Vec<Vec<f32>>, Vec<usize>)> {
    let ds = synthetic(samples, size, seed)?;
    Ok((ds.images.into_iter().map(Tensor::into_data).collect(), ds.labels))
}

/// Regular grid of `n×n` cell centers as `(ys, xs)`.
#[pyfunction]
fn init_grid(height: usize, width: usize, n: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let spec = GridSpec::new(height, width, n).map_err(to_py)?;
    let g = grid::<f64>(&spec).into_data();
    let count = spec.num_points();
    Ok((g[..count].to_vec(), g[count..].to_vec()))
}

/// Bilinear samples of a flat `C×H×W` field at `(ys[i], xs[i])`; returns
/// one `C`-vector per location.
#[pyfunction]
fn bilinear_sample(
    feature: Vec<f64>,
    shape: (usize, usize, usize),
    ys: Vec<f64>,
    xs: Vec<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    if ys.len() != xs.len() {
        return Err(PyValueError::new_err("ys and xs must have equal length"));
    }
    let (c, h, w) = shape;
    let f = Tensor::new(&[c, h, w], feature).map_err(to_py)?;
    let l = ys.len();
    let p = Tensor::new(&[2, l], [ys, xs].concat()).map_err(to_py)?;
    let s = sample(&f, &p).map_err(to_py)?;
    Ok((0..l)
        .map(|i| (0..c).map(|ch| s.data()[ch * l + i]).collect())
        .collect())
}

/// Names of the registered gradient audits.
#[pyfunction]
fn gradcheck_ops() -> Vec<&'static str> {
    gradcheck::registry().iter().map(|c| c.name).collect()
}

/// Runs one audit over `seeds` consecutive seeds; returns per-seed
/// `{"op", "seed", "pass", "max_rel", "max_abs", "coords"}` dictionaries.
#[pyfunction]
#[pyo3(signature = (scope, seeds = 5, h = gradcheck::DEFAULT_STEP))]
fn gradcheck_run<'py>(py: Python<'py>, scope: &str, seeds: u64, h: f64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let case = gradcheck::find_case(scope).ok_or_else(|| PyValueError::new_err(format!("unknown audit {scope:?}")))?;
    let seeds: Vec<u64> = (0..seeds).collect();
    let reports = gradcheck::run_case(&case, &seeds, h).map_err(to_py)?;
    reports
        .iter()
        .zip(&seeds)
        .map(|(r, s)| {
            let d = PyDict::new(py);
            d.set_item("op", case.name)?;
            d.set_item("seed", *s)?;
            d.set_item("pass", r.pass)?;
            d.set_item("max_rel", r.max_rel())?;
            d.set_item("max_abs", r.max_abs())?;
            d.set_item("coords", r.coords())?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn psvit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(init_grid, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_sample, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_ops, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_run, m)?)?;
    m.add("PRESETS", PsVitConfig::PRESETS.to_vec())?;
    Ok(())
}
