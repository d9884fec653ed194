//! Python bindings: volumes, phantom data, models, training, inference and metrics.
//!
//! Arrays cross the boundary as flat lists in row-major `(h, w, d)` order with
//! the slice index varying slowest.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mcddpm::config::{desk_model, RunConfig};
use mcddpm::data::{generate_phantom_dataset, split_records, AnomalySpec, PhantomSpec, Split, VolumeRecord};
use mcddpm::diffusion::{make_linear_schedule, q_sample_full};
use mcddpm::evaluation::{analyze_case, evaluate_cases};
use mcddpm::inference::{reconstruct_volume, residual_map, AnomalyMap};
use mcddpm::postprocess::{segment as segment_map, PostprocessConfig};
use mcddpm::training::{fit, Trainer};
use mcddpm::{Ablation, BinaryMap, InferenceConfig, PNorm, Slice2D, Volume3D};

fn err(e: mcddpm::Error) -> PyErr {
    match e {
        mcddpm::Error::InvalidArgument(m) => PyValueError::new_err(m),
        e @ mcddpm::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn p_norm(p: u32) -> PyResult<PNorm> {
    PNorm::from_int(p).map_err(err)
}

/// 3-D float volume.
#[pyclass(name = "Volume", from_py_object)]
#[derive(Clone)]
pub struct PyVolume {
    inner: Volume3D,
}

#[pymethods]
impl PyVolume {
    #[new]
    fn new(h: usize, w: usize, d: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(PyVolume { inner: Volume3D::new(h, w, d, data).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyVolume { inner: mcddpm::io::read_volume(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        mcddpm::io::write_volume(path, &self.inner).map_err(err)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn get(&self, i: usize, j: usize, k: usize) -> PyResult<f32> {
        let (h, w, d) = self.inner.dims();
        if i >= h || j >= w || k >= d {
            return Err(PyValueError::new_err(format!("index ({i}, {j}, {k}) outside {h}x{w}x{d}")));
        }
        Ok(self.inner.get(i, j, k))
    }

    fn max(&self) -> f32 {
        self.inner.data().iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    fn __repr__(&self) -> String {
        let (h, w, d) = self.inner.dims();
        format!("Volume({h}x{w}x{d})")
    }
}

/// 3-D binary mask.
#[pyclass(name = "Mask", from_py_object)]
#[derive(Clone)]
pub struct PyMask {
    inner: BinaryMap,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(h: usize, w: usize, d: usize, data: Vec<u8>) -> PyResult<Self> {
        Ok(PyMask { inner: BinaryMap::new(h, w, d, data).map_err(err)? })
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn to_list(&self) -> Vec<u8> {
        self.inner.data().to_vec()
    }

    fn __repr__(&self) -> String {
        let (h, w, d) = self.inner.dims();
        format!("Mask({h}x{w}x{d}, {} set)", self.inner.count())
    }
}

/// One subject of a dataset.
#[pyclass(name = "Record", from_py_object)]
#[derive(Clone)]
pub struct PyRecord {
    inner: VolumeRecord,
}

#[pymethods]
impl PyRecord {
    #[getter]
    fn subject_id(&self) -> String {
        self.inner.subject_id.clone()
    }

    #[getter]
    fn split(&self) -> String {
        self.inner.split.to_string()
    }

    #[getter]
    fn volume(&self) -> PyVolume {
        PyVolume { inner: self.inner.volume.clone() }
    }

    #[getter]
    fn ground_truth(&self) -> Option<PyMask> {
        self.inner.ground_truth.clone().map(|inner| PyMask { inner })
    }
}

/// Trained or freshly initialised model with its training settings.
#[pyclass(name = "Checkpoint", from_py_object)]
#[derive(Clone)]
pub struct PyCheckpoint {
    inner: mcddpm::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyCheckpoint { inner: mcddpm::Checkpoint::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn val_error(&self) -> Option<f64> {
        self.inner.val_error
    }

    #[getter]
    fn ablation(&self) -> String {
        self.inner.model_config.ablation.to_string()
    }

    fn parameter_count(&self) -> usize {
        self.inner.params.count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.names().cloned().collect()
    }
}

/// Phantom records; `max_anomalies = 0` makes the test split healthy.
#[pyfunction]
#[pyo3(signature = (seed=0, size=64, depth=20, train=24, val=4, test=6, max_anomalies=3, radius=(4.0, 7.0)))]
#[allow(clippy::too_many_arguments)]
fn generate_phantom(
    seed: u64,
    size: usize,
    depth: usize,
    train: usize,
    val: usize,
    test: usize,
    max_anomalies: usize,
    radius: (f32, f32),
) -> PyResult<Vec<PyRecord>> {
    let spec = PhantomSpec {
        image_size: (size, size),
        depth,
        train_volumes: train,
        val_volumes: val,
        test_volumes: test,
        anomaly: AnomalySpec { count: (max_anomalies.min(1), max_anomalies), radius, ..AnomalySpec::default() },
        seed,
        ..PhantomSpec::default()
    };
    Ok(generate_phantom_dataset(&spec).map_err(err)?.into_iter().map(|inner| PyRecord { inner }).collect())
}

/// `(betas, alpha_bars)`; `betas[t - 1]` is step `t`, `alpha_bars[t]` is step `t` with `alpha_bars[0] = 1`.
#[pyfunction]
#[pyo3(signature = (steps=1000))]
fn linear_schedule(steps: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = make_linear_schedule(steps).map_err(err)?;
    Ok((s.betas().to_vec(), (0..=steps).map(|t| s.alpha_bar(t)).collect()))
}

/// Forward process on one `h × w` slice with caller-supplied noise.
#[pyfunction]
fn q_sample(h: usize, w: usize, x0: Vec<f32>, t: usize, noise: Vec<f32>) -> PyResult<Vec<f32>> {
    let s = make_linear_schedule(1000).map_err(err)?;
    let x0 = Slice2D::new(h, w, x0).map_err(err)?;
    let noise = Slice2D::new(h, w, noise).map_err(err)?;
    Ok(q_sample_full(&x0, t, &s, &noise).map_err(err)?.into_data())
}

fn split_of(records: &[PyRecord], split: Split) -> Vec<VolumeRecord> {
    split_records(records.iter().map(|r| r.inner.clone()).collect(), split)
}

/// Trains the desk-scale model, or the model described by `config` (flat `key = value` text).
#[pyfunction]
#[pyo3(signature = (records, ablation="full", epochs=10, lr=1e-3, lambda_=0.5, p=2, seed=0, patch=32, config=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    records: Vec<PyRecord>,
    ablation: &str,
    epochs: usize,
    lr: f64,
    lambda_: f64,
    p: u32,
    seed: u64,
    patch: usize,
    config: Option<&str>,
) -> PyResult<PyCheckpoint> {
    let ablation: Ablation = ablation.parse().map_err(err)?;
    let (model_cfg, mut train_cfg) = match config {
        Some(text) => {
            let c = RunConfig::parse(text).map_err(err)?;
            (c.model, c.train)
        }
        None => (desk_model(ablation), mcddpm::TrainConfig::default()),
    };
    if config.is_none() {
        train_cfg.patches = mcddpm::diffusion::PatchSampler { sizes: vec![(patch, patch)] };
    }
    train_cfg.max_epochs = epochs;
    train_cfg.lr = lr;
    train_cfg.lambda = lambda_;
    train_cfg.p_norm = p_norm(p)?;
    train_cfg.seed = seed;
    let train = split_of(&records, Split::Train);
    let val = split_of(&records, Split::Val);
    let best = py
        .detach(|| -> mcddpm::Result<mcddpm::Checkpoint> {
            let trainer = Trainer::new(mcddpm::Mcddpm::new(model_cfg, seed)?, train_cfg)?;
            Ok(fit(trainer, &train, &val)?.best)
        })
        .map_err(err)?;
    Ok(PyCheckpoint { inner: best })
}

#[pyfunction]
#[pyo3(signature = (checkpoint, volume, t_test=500, seed=0, repeats=1))]
fn reconstruct(py: Python<'_>, checkpoint: &PyCheckpoint, volume: &PyVolume, t_test: usize, seed: u64, repeats: usize) -> PyResult<PyVolume> {
    let model = checkpoint.inner.model().map_err(err)?;
    let schedule = make_linear_schedule(checkpoint.inner.train_config.diffusion_steps).map_err(err)?;
    let cfg = InferenceConfig { t_test, seed, repeats, ..InferenceConfig::default() };
    let v = &volume.inner;
    let out = py.detach(|| reconstruct_volume(&model, v, &schedule, &cfg)).map_err(err)?;
    Ok(PyVolume { inner: out })
}

#[pyfunction]
#[pyo3(signature = (volume, reconstruction, p=2))]
fn anomaly_map(volume: &PyVolume, reconstruction: &PyVolume, p: u32) -> PyResult<PyVolume> {
    Ok(PyVolume { inner: residual_map(&volume.inner, &reconstruction.inner, p_norm(p)?).map_err(err)?.data })
}

/// Median filter, eroded brain mask and threshold.
#[pyfunction]
#[pyo3(signature = (volume, anomaly, theta=0.2, kernel=5, erosion=3))]
fn segment(volume: &PyVolume, anomaly: &PyVolume, theta: f64, kernel: usize, erosion: usize) -> PyResult<PyMask> {
    let cfg = PostprocessConfig { median_kernel: kernel, erosion_iterations: erosion, theta };
    let map = AnomalyMap { data: anomaly.inner.clone(), p_norm: PNorm::L2 };
    Ok(PyMask { inner: segment_map(&volume.inner, &map, &cfg).map_err(err)? })
}

#[pyfunction]
fn dice(pred: &PyMask, truth: &PyMask) -> PyResult<f64> {
    mcddpm::evaluation::dice(&pred.inner, &truth.inner).map_err(err)
}

/// Area under the precision-recall curve of `scores` inside `mask`.
#[pyfunction]
fn auprc(scores: &PyVolume, truth: &PyMask, mask: &PyMask) -> PyResult<f64> {
    let map = AnomalyMap { data: scores.inner.clone(), p_norm: PNorm::L2 };
    mcddpm::evaluation::auprc(&map, &truth.inner, &mask.inner).map_err(err)
}

/// Report rows (`dice_pooled`, `dice_mean`, `auprc` in percent, `None` where not applicable).
#[pyfunction]
#[pyo3(signature = (checkpoint, records, split="test", thetas=vec![0.2], p=2, t_test=500, seed=0))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    checkpoint: &PyCheckpoint,
    records: Vec<PyRecord>,
    split: &str,
    thetas: Vec<f64>,
    p: u32,
    t_test: usize,
    seed: u64,
) -> PyResult<Vec<(f64, Option<f64>, Option<f64>, Option<f64>, Option<f64>)>> {
    let split: Split = split.parse().map_err(err)?;
    let p = p_norm(p)?;
    let model = checkpoint.inner.model().map_err(err)?;
    let schedule = make_linear_schedule(checkpoint.inner.train_config.diffusion_steps).map_err(err)?;
    let infer = InferenceConfig { t_test, seed, ..InferenceConfig::default() };
    let post = PostprocessConfig::default();
    let recs = split_of(&records, split);
    let rows = py
        .detach(|| -> mcddpm::Result<_> {
            let cases = recs
                .iter()
                .map(|r| analyze_case(&model, r, &schedule, &infer, &post, p))
                .collect::<mcddpm::Result<Vec<_>>>()?;
            evaluate_cases(&cases, &thetas, "python", "memory")
        })
        .map_err(err)?;
    Ok(rows.into_iter().map(|r| (r.theta, r.dice_pooled, r.dice_mean, r.auprc, r.recon_error)).collect())
}

#[pymodule]
fn mcddpm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyRecord>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(linear_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(q_sample, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(anomaly_map, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
