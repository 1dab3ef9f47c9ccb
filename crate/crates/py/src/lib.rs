//! Python bindings for the dyhsl forecaster.

use std::error::Error as _;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dyhsl::checkpoint::{Checkpoint, CheckpointMeta};
use dyhsl::dataio::{synth_generate, NormStats, SignalMeta, SignalTensor, SynthConfig};
use dyhsl::learning::{
    evaluate_model, fit, ha_report, Dataset, MetricReport, SplitName, TrainConfig,
};
use dyhsl::multiscale::{DyhslModel, ModelConfig, ModelParameters};
use dyhsl::numerics::Tensor;
use dyhsl::topology::{Edge, RoadNetwork};
use dyhsl::verify::{run_all, VerifyOptions};

fn to_py(e: dyhsl::Error) -> PyErr {
    let mut msg = e.to_string();
    let mut src = e.source();
    while let Some(s) = src {
        msg.push_str(": ");
        msg.push_str(&s.to_string());
        src = s.source();
    }
    match e {
        dyhsl::Error::Io { .. } => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn parse_split(split: &str) -> PyResult<SplitName> {
    split.parse().map_err(to_py)
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mae", r.mae)?;
    d.set_item("rmse", r.rmse)?;
    d.set_item("mape", r.mape)?;
    Ok(d)
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Directed, weighted road graph over `n_nodes` sensors.
#[pyclass(name = "RoadNetwork", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRoadNetwork {
    inner: RoadNetwork,
}

#[pymethods]
impl PyRoadNetwork {
    #[new]
    fn new(n_nodes: usize, edges: Vec<(usize, usize, f64)>) -> PyResult<Self> {
        let edges = edges
            .into_iter()
            .map(|(from, to, weight)| Edge { from, to, weight })
            .collect();
        Ok(Self {
            inner: RoadNetwork::new(n_nodes, edges).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn read_csv(path: PathBuf, n_nodes: usize) -> PyResult<Self> {
        Ok(Self {
            inner: RoadNetwork::read_csv(&path, n_nodes).map_err(to_py)?,
        })
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    #[getter]
    fn nnz(&self) -> usize {
        self.inner.nnz()
    }

    fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.inner
            .edges()
            .iter()
            .map(|e| (e.from, e.to, e.weight))
            .collect()
    }
}

/// Signals laid out `[T, N, F]` in row-major order.
#[pyclass(name = "Signals", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySignals {
    inner: SignalTensor,
}

#[pymethods]
impl PySignals {
    #[new]
    #[pyo3(signature = (values, n_timesteps, n_nodes, n_features = 1, interval_minutes = 5))]
    fn new(
        values: Vec<f64>,
        n_timesteps: usize,
        n_nodes: usize,
        n_features: usize,
        interval_minutes: u32,
    ) -> PyResult<Self> {
        let meta = SignalMeta {
            n_timesteps,
            n_nodes,
            n_features,
            interval_minutes,
        };
        Ok(Self {
            inner: SignalTensor::new(meta, values).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SignalTensor::read(&path).map_err(to_py)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (
            self.inner.n_timesteps(),
            self.inner.n_nodes(),
            self.inner.n_features(),
        )
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn get(&self, t: usize, node: usize, feature: usize) -> PyResult<f64> {
        let (nt, n, f) = self.shape();
        if t >= nt || node >= n || feature >= f {
            return Err(PyValueError::new_err(format!(
                "index ({t}, {node}, {feature}) outside shape ({nt}, {n}, {f})"
            )));
        }
        Ok(self.inner.get(t, node, feature))
    }
}

/// Generates community-structured synthetic traffic. Returns
/// `(signals, network, membership)`.
#[pyfunction]
#[pyo3(signature = (nodes = 30, communities = 3, steps = 4032, seed = 0, noise = 5.0))]
fn synth(
    nodes: usize,
    communities: usize,
    steps: usize,
    seed: u64,
    noise: f64,
) -> PyResult<(PySignals, PyRoadNetwork, Vec<usize>)> {
    let cfg = SynthConfig {
        noise_std: noise,
        ..SynthConfig::new(nodes, communities, steps, seed)
    };
    let data = synth_generate(&cfg).map_err(to_py)?;
    Ok((
        PySignals {
            inner: data.signals,
        },
        PyRoadNetwork {
            inner: data.network,
        },
        data.membership,
    ))
}

/// Historical-average metrics on one split of `signals`.
#[pyfunction]
#[pyo3(signature = (signals, lookback = 12, horizon = 12, split = "test"))]
fn ha_evaluate<'py>(
    py: Python<'py>,
    signals: &PySignals,
    lookback: usize,
    horizon: usize,
    split: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let data = Dataset::prepare(&signals.inner, lookback, horizon).map_err(to_py)?;
    let r = ha_report(&data, parse_split(split)?).map_err(to_py)?;
    report_dict(py, &r)
}

/// Runs the built-in oracle families; one dict per family.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn verify<'py>(py: Python<'py>, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let opts = VerifyOptions {
        seed,
        corrupt_w2_grad: false,
    };
    let results = py.detach(|| run_all(opts)).map_err(to_py)?;
    results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", r.name)?;
            d.set_item("observed", r.observed)?;
            d.set_item("tolerance", r.tolerance)?;
            d.set_item("passed", r.passed())?;
            d.set_item("detail", &r.detail)?;
            Ok(d)
        })
        .collect()
}

/// Forecaster bound to one road network. Normalization statistics are set by
/// `fit` or restored by `load`.
#[pyclass(name = "Model")]
struct PyModel {
    model: DyhslModel,
    params: ModelParameters,
    norm: Option<NormStats>,
}

impl PyModel {
    fn dataset(&self, signals: &SignalTensor) -> PyResult<Dataset> {
        let cfg = self.model.config();
        let norm = self.norm.clone().ok_or_else(|| {
            PyValueError::new_err("model has no normalization statistics; call fit first")
        })?;
        Dataset::with_stats(signals, norm, cfg.lookback, cfg.horizon).map_err(to_py)
    }

    fn window(&self, x: Vec<f64>) -> PyResult<Tensor> {
        let c = self.model.config();
        Tensor::new(vec![c.lookback, c.n_nodes, c.n_features], x).map_err(to_py)
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        network,
        n_features = 1,
        d = 64,
        hyperedges = 32,
        windows = vec![1, 2, 3, 4, 6, 12],
        lp = 6,
        ls = 2,
        lh = 1,
        lookback = 12,
        horizon = 12,
        seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        network: &PyRoadNetwork,
        n_features: usize,
        d: usize,
        hyperedges: usize,
        windows: Vec<usize>,
        lp: usize,
        ls: usize,
        lh: usize,
        lookback: usize,
        horizon: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            n_nodes: network.inner.n_nodes(),
            n_features,
            lookback,
            horizon,
            dim: d,
            hyperedges,
            prior_layers: lp,
            hyper_layers: lh,
            scale_layers: ls,
            windows,
        };
        cfg.validate().map_err(to_py)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let params = ModelParameters::init(&cfg, &mut rng).map_err(to_py)?;
        Ok(Self {
            model: DyhslModel::new(cfg, &network.inner).map_err(to_py)?,
            params,
            norm: None,
        })
    }

    /// Restores a checkpoint written by `save` or the `train` command.
    #[staticmethod]
    fn load(path: PathBuf, network: &PyRoadNetwork) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        let model = DyhslModel::new(ck.meta.model, &network.inner).map_err(to_py)?;
        model.check_params(&ck.params).map_err(to_py)?;
        Ok(Self {
            model,
            params: ck.params,
            norm: Some(ck.meta.norm),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let norm = self
            .norm
            .clone()
            .ok_or_else(|| PyValueError::new_err("fit the model before saving it"))?;
        Checkpoint {
            meta: CheckpointMeta {
                model: self.model.config().clone(),
                norm,
                train: None,
            },
            params: self.params.clone(),
        }
        .save(&path)
        .map_err(to_py)
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.params.n_parameters()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.model.config();
        let d = PyDict::new(py);
        d.set_item("n_nodes", c.n_nodes)?;
        d.set_item("n_features", c.n_features)?;
        d.set_item("lookback", c.lookback)?;
        d.set_item("horizon", c.horizon)?;
        d.set_item("d", c.dim)?;
        d.set_item("hyperedges", c.hyperedges)?;
        d.set_item("lp", c.prior_layers)?;
        d.set_item("lh", c.hyper_layers)?;
        d.set_item("ls", c.scale_layers)?;
        d.set_item("windows", c.windows.clone())?;
        Ok(d)
    }

    /// Trains on the train split of `signals`, keeping the parameters with
    /// the best validation MAE. Returns per-epoch history and the step count.
    #[pyo3(signature = (signals, epochs = 100, batch_size = 32, lr = 0.001, seed = 0, workers = 1, grad_clip = None))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        signals: &PySignals,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
        workers: usize,
        grad_clip: Option<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = self.model.config().clone();
        if signals.inner.n_nodes() != cfg.n_nodes || signals.inner.n_features() != cfg.n_features {
            return Err(PyValueError::new_err(format!(
                "model expects N={} F={}, signals have N={} F={}",
                cfg.n_nodes,
                cfg.n_features,
                signals.inner.n_nodes(),
                signals.inner.n_features()
            )));
        }
        let tc = TrainConfig {
            epochs,
            batch_size,
            learning_rate: lr,
            seed,
            workers,
            grad_clip,
            ..TrainConfig::default()
        };
        let data = Dataset::prepare(&signals.inner, cfg.lookback, cfg.horizon).map_err(to_py)?;
        let init = self.params.clone();
        let model = &self.model;
        let outcome = py.detach(|| fit(model, init, &data, &tc)).map_err(to_py)?;

        let history = outcome
            .history
            .iter()
            .map(|r| {
                let d = report_dict(py, &r.report)?;
                d.set_item("epoch", r.epoch)?;
                d.set_item("split", r.split.as_str())?;
                Ok(d)
            })
            .collect::<PyResult<Vec<_>>>()?;
        let out = PyDict::new(py);
        out.set_item("best_epoch", outcome.best_epoch)?;
        out.set_item("steps", outcome.steps)?;
        out.set_item("history", history)?;
        self.params = outcome.params;
        self.norm = Some(data.stats);
        Ok(out)
    }

    /// Metrics on one split, in the units of the raw signal.
    #[pyo3(signature = (signals, split = "test", workers = 1))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        signals: &PySignals,
        split: &str,
        workers: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let data = self.dataset(&signals.inner)?;
        let split = parse_split(split)?;
        let r = py
            .detach(|| evaluate_model(&self.model, &self.params, &data, split, workers))
            .map_err(to_py)?;
        report_dict(py, &r)
    }

    /// Forecast for one normalized input window given flat `[T, N, F]`;
    /// returns `T'` rows of `N` normalized values.
    fn predict(&self, window: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let x = self.window(window)?;
        let y = self.model.predict(&self.params, &x).map_err(to_py)?;
        Ok(tensor_rows(&y))
    }

    /// First-layer incidence matrices of every scale for one normalized input
    /// window; each is `(T / window) * N` rows of hyperedge weights.
    fn incidences(&self, window: Vec<f64>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let x = self.window(window)?;
        let inc = self.model.incidences(&self.params, &x).map_err(to_py)?;
        Ok(inc.iter().map(tensor_rows).collect())
    }
}

#[pymodule]
fn dyhsl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRoadNetwork>()?;
    m.add_class::<PySignals>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(ha_evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
