//! Python bindings: models, datasets, conversion, simulation and diagnostics.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use snnconv::balance::{
    BalanceConfig, Granularity, DEFAULT_BATCH_SIZE, DEFAULT_ETA, DEFAULT_ITERATIONS,
};
use snnconv::diagnostics;
use snnconv::forward::{apply_readout_scale, forward_with_mode};
use snnconv::io::{load_model, save_model, Dataset};
use snnconv::pipeline::{self, ConvertConfig, EvalConfig};
use snnconv::snn::{self, SimConfig, DEFAULT_DELAY_WINDOW};
use snnconv::spectral::NormVariant;
use snnconv::{ActivationMode, NetworkGraph, Tensor};

fn err(e: snnconv::Error) -> PyErr {
    match e {
        snnconv::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_data_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<ActivationMode> {
    match mode {
        "relu" => Ok(ActivationMode::Relu),
        "clip" => Ok(ActivationMode::Clip),
        "if" => Ok(ActivationMode::If),
        m => Err(PyValueError::new_err(format!(
            "unknown activation mode {m:?}"
        ))),
    }
}

fn parse_norm(norm: &str) -> PyResult<NormVariant> {
    NormVariant::parse(norm).ok_or_else(|| PyValueError::new_err(format!("unknown norm {norm:?}")))
}

/// Dense row-major f32 array.
#[pyclass(name = "Tensor", module = "snnconv_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor(pub Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self(Tensor::new(shape, data).map_err(err)?))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    /// Flat row-major values.
    #[getter]
    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// A network graph with its weights and thresholds.
#[pyclass(name = "Model", module = "snnconv_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel(pub NetworkGraph);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(manifest: &str, weights: &str) -> PyResult<Self> {
        Ok(Self(load_model(manifest, weights).map_err(err)?))
    }

    fn save(&self, manifest: &str, weights: &str) -> PyResult<()> {
        save_model(&self.0, manifest, weights).map_err(err)
    }

    /// Folds batch norm and moves max pooling in front of the activations.
    fn prepare(&self) -> PyResult<Self> {
        Ok(Self(pipeline::prepare(&self.0).map_err(err)?))
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.0.activation_mode.as_str()
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.0.input_shape.clone()
    }

    #[getter]
    fn output_shape(&self) -> PyResult<Vec<usize>> {
        self.0.output_shape().map_err(err)
    }

    #[getter]
    fn layer_kinds(&self) -> Vec<&'static str> {
        self.0.layers.iter().map(|l| l.kind()).collect()
    }

    /// Layer indices of the activation layers.
    #[getter]
    fn activation_slots(&self) -> Vec<usize> {
        self.0.activation_slots()
    }

    #[getter]
    fn t0_estimate(&self) -> Option<f64> {
        self.0.meta.t0_estimate
    }

    /// Thresholds of an activation layer, one per channel.
    fn thresholds(&self, layer: usize) -> PyResult<Vec<f32>> {
        let shapes = self.0.shapes().map_err(err)?;
        let slot = self
            .0
            .slot(layer)
            .ok_or_else(|| PyValueError::new_err(format!("layer {layer} is not an activation")))?;
        let channels = snnconv::graph::channels_of(&shapes[layer]);
        Ok(slot.theta_per_channel(channels))
    }

    /// Non-spiking forward pass; `if` runs as `clip`. Outputs include the readout scale.
    #[pyo3(signature = (batch, mode=None))]
    fn forward(&self, batch: &PyTensor, mode: Option<&str>) -> PyResult<PyTensor> {
        let mode = match mode {
            Some(m) => parse_mode(m)?,
            None => self.0.activation_mode,
        };
        let rec = forward_with_mode(&self.0, &batch.0, mode).map_err(err)?;
        let mut out = rec.output().clone();
        apply_readout_scale(&self.0, &mut out);
        Ok(PyTensor(out))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(mode={}, layers={}, input_shape={:?})",
            self.0.activation_mode,
            self.0.layers.len(),
            self.0.input_shape
        )
    }
}

/// Samples with optional class labels.
#[pyclass(name = "Dataset", module = "snnconv_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset(pub Dataset);

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (samples, labels=None))]
    fn new(samples: &PyTensor, labels: Option<Vec<u32>>) -> PyResult<Self> {
        Ok(Self(Dataset::new(samples.0.clone(), labels).map_err(err)?))
    }

    #[staticmethod]
    #[pyo3(signature = (path, labels=None))]
    fn load(path: &str, labels: Option<&str>) -> PyResult<Self> {
        Ok(Self(
            Dataset::load(path, labels.map(std::path::Path::new)).map_err(err)?,
        ))
    }

    #[pyo3(signature = (path, labels=None))]
    fn save(&self, path: &str, labels: Option<&str>) -> PyResult<()> {
        self.0
            .save(path, labels.map(std::path::Path::new))
            .map_err(err)
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.0.sample_shape().to_vec()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u32>> {
        self.0.labels.clone()
    }

    /// The selected samples as one batch tensor.
    fn batch(&self, indices: Vec<usize>) -> PyResult<PyTensor> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.0.len()) {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(PyTensor(self.0.batch(&indices).data))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Per-slot spike counts of a simulation run.
#[pyclass(name = "SpikeTrace", module = "snnconv_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PySpikeTrace(pub snn::SpikeTrace);

#[pymethods]
impl PySpikeTrace {
    #[getter]
    fn timesteps(&self) -> usize {
        self.0.timesteps
    }

    #[getter]
    fn frames(&self) -> usize {
        self.0.frames
    }

    #[getter]
    fn slots(&self) -> Vec<usize> {
        self.0.slots.clone()
    }

    /// Total spikes per step for each slot.
    #[getter]
    fn per_step(&self) -> Vec<Vec<u64>> {
        self.0.per_step.clone()
    }

    fn total(&self) -> u64 {
        self.0.total()
    }

    #[pyo3(signature = (bucket=1))]
    fn to_csv(&self, bucket: usize) -> String {
        self.0.to_csv(bucket.max(1))
    }
}

/// Folds batch norm, learns thresholds on `data` and returns the spiking
/// model with a summary dict.
#[pyfunction]
#[pyo3(signature = (
    model, data, iterations=DEFAULT_ITERATIONS, eta=DEFAULT_ETA, batch_size=DEFAULT_BATCH_SIZE,
    granularity="channel", seed=0, normalize_by_count=true, absorb=false
))]
#[allow(clippy::too_many_arguments)]
fn convert<'py>(
    py: Python<'py>,
    model: &PyModel,
    data: &PyDataset,
    iterations: usize,
    eta: f64,
    batch_size: usize,
    granularity: &str,
    seed: u64,
    normalize_by_count: bool,
    absorb: bool,
) -> PyResult<(PyModel, Bound<'py, PyDict>)> {
    let granularity = match granularity {
        "layer" => Granularity::LayerWise,
        "channel" => Granularity::ChannelWise,
        g => return Err(PyValueError::new_err(format!("unknown granularity {g:?}"))),
    };
    let config = ConvertConfig {
        balance: BalanceConfig {
            eta,
            iterations,
            granularity,
            batch_size,
            seed,
            normalize_by_count,
            ..Default::default()
        },
        absorb,
        norm_variant: NormVariant::Operator,
    };
    let (graph, data) = (&model.0, &data.0);
    let c = py
        .detach(|| pipeline::convert(graph, data, &config))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("t0_estimate", c.t0.value)?;
    d.set_item("iterations", c.report.iterations)?;
    d.set_item("final_delta", c.report.final_delta.clone())?;
    d.set_item("convergence_csv", c.report.to_csv())?;
    Ok((PyModel(c.graph), d))
}

fn eval_config(
    timesteps: Vec<usize>,
    delay: Option<usize>,
    delay_window: usize,
    batch_size: usize,
) -> PyResult<EvalConfig> {
    let cfg = EvalConfig {
        timesteps,
        delay,
        delay_window,
        batch_size,
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Top-1 accuracy of the spiking model at each simulation length, next to the ANN.
#[pyfunction]
#[pyo3(signature = (model, data, timesteps=vec![32, 64, 128], delay=None, delay_window=DEFAULT_DELAY_WINDOW, batch_size=DEFAULT_BATCH_SIZE))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    data: &PyDataset,
    timesteps: Vec<usize>,
    delay: Option<usize>,
    delay_window: usize,
    batch_size: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = eval_config(timesteps, delay, delay_window, batch_size)?;
    let (graph, data) = (&model.0, &data.0);
    let r = py
        .detach(|| pipeline::evaluate(graph, data, &cfg))
        .map_err(err)?;
    let d = PyDict::new(py);
    let rows: Vec<(usize, usize, usize, f64)> = r
        .rows
        .iter()
        .map(|row| (row.timesteps, row.t0, row.correct, row.accuracy))
        .collect();
    d.set_item("rows", rows)?;
    d.set_item("ann_correct", r.ann_correct)?;
    d.set_item("ann_accuracy", r.ann_accuracy)?;
    d.set_item("samples", r.samples)?;
    d.set_item("csv", r.to_csv())?;
    Ok(d)
}

/// Runs the spiking model for `timesteps` steps and averages the output
/// over steps `t0 + 1 ..= timesteps`.
#[pyfunction]
#[pyo3(signature = (model, batch, timesteps, t0=0, record_trace=false))]
fn simulate(
    py: Python<'_>,
    model: &PyModel,
    batch: &PyTensor,
    timesteps: usize,
    t0: usize,
    record_trace: bool,
) -> PyResult<(PyTensor, Option<PySpikeTrace>)> {
    let config = SimConfig {
        timesteps,
        t0,
        record_trace,
    };
    let (graph, x) = (&model.0, &batch.0);
    let (mut out, trace) = py
        .detach(|| snn::simulate(graph, x, &config))
        .map_err(err)?;
    apply_readout_scale(graph, &mut out);
    Ok((PyTensor(out), trace.map(PySpikeTrace)))
}

/// Per-layer conversion error on `batch` against the layer-wise bound.
#[pyfunction]
#[pyo3(signature = (model, batch, timesteps, norm="operator"))]
fn error_bound<'py>(
    py: Python<'py>,
    model: &PyModel,
    batch: &PyTensor,
    timesteps: usize,
    norm: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let variant = parse_norm(norm)?;
    let (graph, x) = (&model.0, &batch.0);
    let r = py
        .detach(|| diagnostics::error_bound(graph, x, timesteps, variant))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("e_model", r.e_model)?;
    d.set_item("bound", r.bound)?;
    d.set_item("proxy_bound", r.proxy_bound)?;
    d.set_item("holds", r.holds())?;
    d.set_item(
        "measured",
        r.layers.iter().map(|l| l.measured).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "layer_bounds",
        r.layers.iter().map(|l| l.bound).collect::<Vec<_>>(),
    )?;
    d.set_item("csv", r.to_csv())?;
    Ok(d)
}

/// Synaptic operations of a recorded trace and the energy estimate
/// against the ANN.
#[pyfunction]
fn energy<'py>(
    py: Python<'py>,
    trace: &PySpikeTrace,
    model: &PyModel,
) -> PyResult<Bound<'py, PyDict>> {
    let sops = diagnostics::count_sops(&trace.0, &model.0).map_err(err)?;
    let flops = diagnostics::count_flops(&model.0).map_err(err)?;
    let frames = trace.0.frames as u64;
    let r = diagnostics::energy_report(sops.sops, flops * frames, frames).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("sops", sops.sops)?;
    d.set_item("comparator_ops", sops.comparator_ops)?;
    d.set_item("analog_macs", sops.analog_macs)?;
    d.set_item("flops", r.flops)?;
    d.set_item("frames", r.frames)?;
    d.set_item("snn_energy_joules", r.snn_energy_joules)?;
    d.set_item("ann_energy_joules", r.ann_energy_joules)?;
    d.set_item("snn_frames_per_joule", r.snn_frames_per_joule)?;
    d.set_item("ann_frames_per_joule", r.ann_frames_per_joule)?;
    Ok(d)
}

/// FLOPs of one ANN inference.
#[pyfunction]
fn count_flops(model: &PyModel) -> PyResult<u64> {
    diagnostics::count_flops(&model.0).map_err(err)
}

/// Expected first-spike delay of the output layer, in steps.
#[pyfunction]
#[pyo3(signature = (model, data, batch_size=DEFAULT_BATCH_SIZE))]
fn estimate_t0(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    batch_size: usize,
) -> PyResult<f64> {
    let (graph, data) = (&model.0, &data.0);
    let est = py
        .detach(|| snn::estimate_t0(graph, data.batches(batch_size, None)?.map(|b| b.data)))
        .map_err(err)?;
    Ok(est.value)
}

/// The output delay used for a run of `timesteps` steps.
#[pyfunction]
#[pyo3(signature = (t0_estimate, timesteps, window=DEFAULT_DELAY_WINDOW))]
fn choose_delay(t0_estimate: f64, timesteps: usize, window: usize) -> usize {
    snn::choose_delay_with_window(t0_estimate, timesteps, window)
}

#[pymodule]
fn snnconv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySpikeTrace>()?;
    m.add_function(wrap_pyfunction!(convert, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(error_bound, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_t0, m)?)?;
    m.add_function(wrap_pyfunction!(choose_delay, m)?)?;
    Ok(())
}
