//! Python bindings: tensor stores, factor models, the SALS family, PSGD,
//! row assignment and the distributed simulator.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sals_core::cluster;
use sals_core::io::{self, CooFileSpec, IndexBase};
use sals_core::partition::{self, AssignStrategy};
use sals_core::sgd::{self, SgdParams};
use sals_core::solver::{self, IterationRecord};
use sals_core::synth::{self, SyntheticConfig};
use sals_core::{ColumnOrder, Error, Monitor, Regularization, SolverParams};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Parse { .. } | Error::Cache { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Entries = Vec<(Vec<usize>, f64)>;

fn to_entries(entries: Entries) -> Vec<sals_core::TensorEntry> {
    entries
        .into_iter()
        .map(|(i, v)| sals_core::TensorEntry::new(i, v))
        .collect()
}

fn from_entries(entries: impl IntoIterator<Item = sals_core::TensorEntry>) -> Entries {
    entries.into_iter().map(|e| (e.indices, e.value)).collect()
}

fn parse_base(base: u8) -> PyResult<IndexBase> {
    match base {
        0 => Ok(IndexBase::Zero),
        1 => Ok(IndexBase::One),
        _ => Err(PyValueError::new_err("index_base must be 0 or 1")),
    }
}

fn parse_reg(s: &str) -> PyResult<Regularization> {
    match s {
        "plain" => Ok(Regularization::Plain),
        "weighted" => Ok(Regularization::Weighted),
        _ => Err(PyValueError::new_err("regularization must be 'plain' or 'weighted'")),
    }
}

fn parse_strategy(s: &str) -> PyResult<AssignStrategy> {
    s.parse().map_err(to_py)
}

/// Observed entries of a sparse tensor (0-based indices).
#[pyclass(name = "TensorStore", module = "sals")]
struct PyTensorStore {
    inner: sals_core::SparseTensorStore,
}

#[pymethods]
impl PyTensorStore {
    #[new]
    fn new(entries: Entries, dims: Vec<usize>) -> PyResult<Self> {
        let inner = sals_core::SparseTensorStore::build(to_entries(entries), &dims).map_err(to_py)?;
        Ok(PyTensorStore { inner })
    }

    /// Reads a COO text file. The order is inferred when omitted.
    #[staticmethod]
    #[pyo3(signature = (path, order=None, index_base=1))]
    fn from_coo(path: PathBuf, order: Option<usize>, index_base: u8) -> PyResult<Self> {
        let order = match order {
            Some(o) => o,
            None => io::sniff_order(&path)
                .map_err(to_py)?
                .ok_or_else(|| PyValueError::new_err("cannot infer the order of an empty file"))?,
        };
        let spec = CooFileSpec {
            index_base: parse_base(index_base)?,
            ..CooFileSpec::new(order)
        };
        let (entries, dims) = io::read_coo(&path, &spec).map_err(to_py)?;
        let inner = sals_core::SparseTensorStore::build(entries, &dims).map_err(to_py)?;
        Ok(PyTensorStore { inner })
    }

    #[pyo3(signature = (path, index_base=1))]
    fn to_coo(&self, path: PathBuf, index_base: u8) -> PyResult<()> {
        let entries: Vec<_> = self.inner.entries().collect();
        io::write_coo(&path, &entries, parse_base(index_base)?).map_err(to_py)
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    #[getter]
    fn nnz(&self) -> usize {
        self.inner.nnz()
    }

    fn entries(&self) -> Entries {
        from_entries(self.inner.entries())
    }

    fn row_count(&self, mode: usize, row: usize) -> PyResult<usize> {
        if mode >= self.inner.order() || row >= self.inner.dims()[mode] {
            return Err(PyValueError::new_err("mode or row out of range"));
        }
        Ok(self.inner.row_count(mode, row))
    }

    fn __len__(&self) -> usize {
        self.inner.nnz()
    }

    fn __repr__(&self) -> String {
        format!("TensorStore(dims={:?}, nnz={})", self.inner.dims(), self.inner.nnz())
    }
}

/// N factor matrices of a rank-K CP model.
#[pyclass(name = "FactorModel", module = "sals")]
struct PyFactorModel {
    inner: sals_core::FactorModel,
}

#[pymethods]
impl PyFactorModel {
    /// `factors[n]` is a list of I_n rows of length K.
    #[new]
    #[pyo3(signature = (factors, lambda_=0.0))]
    fn new(factors: Vec<Vec<Vec<f64>>>, lambda_: f64) -> PyResult<Self> {
        let mut mats = Vec::with_capacity(factors.len());
        for rows in factors {
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(PyValueError::new_err("factor rows must have equal length"));
            }
            let n = rows.len();
            mats.push(sals_core::FactorMatrix::from_vec(n, cols, rows.concat()).map_err(to_py)?);
        }
        let inner = sals_core::FactorModel::from_factors(mats, lambda_).map_err(to_py)?;
        Ok(PyFactorModel { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, lambda_=0.0))]
    fn load(path: PathBuf, lambda_: f64) -> PyResult<Self> {
        Ok(PyFactorModel {
            inner: io::load_model(&path, lambda_).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_model(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims()
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda()
    }

    fn factor(&self, mode: usize) -> PyResult<Vec<Vec<f64>>> {
        if mode >= self.inner.order() {
            return Err(PyValueError::new_err("mode out of range"));
        }
        let f = self.inner.factor(mode);
        Ok((0..f.rows()).map(|i| f.row(i).to_vec()).collect())
    }

    fn reconstruct(&self, indices: Vec<usize>) -> PyResult<f64> {
        let dims = self.inner.dims();
        if indices.len() != dims.len() || indices.iter().zip(&dims).any(|(i, d)| i >= d) {
            return Err(PyValueError::new_err("indices out of range"));
        }
        Ok(self.inner.reconstruct(&indices))
    }

    #[pyo3(signature = (store, regularization="plain"))]
    fn loss(&self, store: &PyTensorStore, regularization: &str) -> PyResult<f64> {
        self.inner.check_compatible(store.inner.dims()).map_err(to_py)?;
        Ok(sals_core::loss_with(&self.inner, &store.inner, parse_reg(regularization)?))
    }

    fn __eq__(&self, other: &PyFactorModel) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("FactorModel(dims={:?}, rank={})", self.inner.dims(), self.inner.rank())
    }
}

fn history_dicts<'py>(py: Python<'py>, history: &[IterationRecord]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    history
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("iteration", r.iteration)?;
            d.set_item("wall_seconds", r.elapsed.as_secs_f64())?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("test_rmse", r.test_rmse)?;
            d.set_item("params_sent", r.params_sent)?;
            d.set_item("params_received", r.params_received)?;
            d.set_item("flops", r.flops)?;
            Ok(d)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn solver_params(
    alg: &str,
    rank: usize,
    columns: Option<usize>,
    outer_iters: usize,
    inner_iters: usize,
    lambda_: f64,
    regularization: &str,
    column_order: Option<&str>,
    seed: u64,
) -> PyResult<SolverParams> {
    let mut p = match alg {
        "sals" => SolverParams::new(rank, columns.unwrap_or(rank.min(10))),
        "als" => {
            if columns.is_some_and(|c| c != rank) || inner_iters != 1 {
                return Err(PyValueError::new_err("als fixes columns = rank and inner_iters = 1"));
            }
            SolverParams::als(rank)
        }
        "cdtf" => {
            if columns.is_some_and(|c| c != 1) {
                return Err(PyValueError::new_err("cdtf fixes columns = 1"));
            }
            SolverParams::cdtf(rank)
        }
        _ => return Err(PyValueError::new_err("alg must be 'sals', 'als' or 'cdtf'")),
    };
    p.outer_iters = outer_iters;
    p.inner_iters = inner_iters;
    p.lambda = lambda_;
    p.regularization = parse_reg(regularization)?;
    match column_order {
        None => {}
        Some("random") => p.column_order = ColumnOrder::RandomPerOuter,
        Some("fixed") => p.column_order = ColumnOrder::Fixed,
        Some(_) => return Err(PyValueError::new_err("column_order must be 'random' or 'fixed'")),
    }
    p.seed = seed;
    p.validate().map_err(to_py)?;
    Ok(p)
}

/// Generates a synthetic tensor; returns (train, test entries, truth).
#[pyfunction]
#[pyo3(signature = (dims, nnz, rank, noise=0.0, test_fraction=0.0, seed=0))]
fn generate(
    dims: Vec<usize>,
    nnz: usize,
    rank: usize,
    noise: f64,
    test_fraction: f64,
    seed: u64,
) -> PyResult<(PyTensorStore, Entries, PyFactorModel)> {
    let config = SyntheticConfig {
        dims,
        nnz,
        rank,
        noise_sigma: noise,
        test_fraction,
        seed,
    };
    let data = synth::generate_synthetic(&config).map_err(to_py)?;
    Ok((
        PyTensorStore { inner: data.train },
        from_entries(data.test),
        PyFactorModel { inner: data.truth },
    ))
}

/// Runs SALS, ALS or CDTF; returns (model, per-iteration records).
#[pyfunction]
#[pyo3(signature = (
    store, rank, alg="sals", columns=None, outer_iters=10, inner_iters=1, lambda_=0.1,
    regularization="plain", column_order=None, seed=0, test=None
))]
#[allow(clippy::too_many_arguments)]
fn factorize<'py>(
    py: Python<'py>,
    store: &PyTensorStore,
    rank: usize,
    alg: &str,
    columns: Option<usize>,
    outer_iters: usize,
    inner_iters: usize,
    lambda_: f64,
    regularization: &str,
    column_order: Option<&str>,
    seed: u64,
    test: Option<Entries>,
) -> PyResult<(PyFactorModel, Vec<Bound<'py, PyDict>>)> {
    let params = solver_params(
        alg,
        rank,
        columns,
        outer_iters,
        inner_iters,
        lambda_,
        regularization,
        column_order,
        seed,
    )?;
    let test = to_entries(test.unwrap_or_default());
    let cdtf = alg == "cdtf";
    let store = &store.inner;
    let out = py
        .detach(|| {
            let monitor = Monitor::new().with_test(&test);
            if cdtf {
                solver::factorize_cdtf_detailed(store, &params, monitor)
            } else {
                solver::factorize_detailed(store, &params, monitor)
            }
        })
        .map_err(to_py)?;
    Ok((PyFactorModel { inner: out.model }, history_dicts(py, &out.history)?))
}

/// Parallel SGD with model averaging; returns (model, records).
#[pyfunction]
#[pyo3(signature = (store, rank, lambda_=0.1, eta0=0.01, outer_iters=10, shards=1, seed=0, test=None))]
#[allow(clippy::too_many_arguments)]
fn psgd<'py>(
    py: Python<'py>,
    store: &PyTensorStore,
    rank: usize,
    lambda_: f64,
    eta0: f64,
    outer_iters: usize,
    shards: usize,
    seed: u64,
    test: Option<Entries>,
) -> PyResult<(PyFactorModel, Vec<Bound<'py, PyDict>>)> {
    let params = SgdParams {
        rank,
        lambda: lambda_,
        eta0,
        outer_iters,
        shards,
        seed,
    };
    let test = to_entries(test.unwrap_or_default());
    let store = &store.inner;
    let (model, history) = py
        .detach(|| sgd::psgd(store, &params, Monitor::new().with_test(&test)))
        .map_err(to_py)?;
    Ok((PyFactorModel { inner: model }, history_dicts(py, &history)?))
}

#[pyfunction]
fn rmse(model: &PyFactorModel, test: Entries) -> PyResult<f64> {
    sals_core::rmse(&model.inner, &to_entries(test)).map_err(to_py)
}

/// Per-mode load of one assignment strategy.
#[pyfunction]
#[pyo3(signature = (store, machines, strategy="greedy", seed=0))]
fn partition_stats<'py>(
    py: Python<'py>,
    store: &PyTensorStore,
    machines: usize,
    strategy: &str,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let assignment = partition::assign(&store.inner, machines, parse_strategy(strategy)?, seed).map_err(to_py)?;
    let report = partition::load_stats(&store.inner, &assignment);
    report
        .modes
        .iter()
        .enumerate()
        .map(|(n, m)| {
            let d = PyDict::new(py);
            d.set_item("mode", n)?;
            d.set_item("max_entries", m.max_entries)?;
            d.set_item("mean_entries", m.mean_entries)?;
            d.set_item("max_rows", m.max_rows)?;
            d.set_item("mean_rows", m.mean_rows)?;
            Ok(d)
        })
        .collect()
}

/// Simulated multi-machine SALS; returns (model, records, per-worker
/// communication log as (iteration, worker, sent, received, flops)).
#[pyfunction]
#[pyo3(signature = (
    store, rank, machines, columns=None, outer_iters=10, inner_iters=1, lambda_=0.1,
    regularization="plain", strategy="greedy", seed=0, test=None
))]
#[allow(clippy::too_many_arguments)]
fn run_distributed<'py>(
    py: Python<'py>,
    store: &PyTensorStore,
    rank: usize,
    machines: usize,
    columns: Option<usize>,
    outer_iters: usize,
    inner_iters: usize,
    lambda_: f64,
    regularization: &str,
    strategy: &str,
    seed: u64,
    test: Option<Entries>,
) -> PyResult<(PyFactorModel, Vec<Bound<'py, PyDict>>, Vec<(usize, usize, u64, u64, u64)>)> {
    let params = solver_params(
        "sals",
        rank,
        columns,
        outer_iters,
        inner_iters,
        lambda_,
        regularization,
        None,
        seed,
    )?;
    let test = to_entries(test.unwrap_or_default());
    let strategy = parse_strategy(strategy)?;
    let store = &store.inner;
    let out = py
        .detach(|| {
            let assignment = partition::assign(store, machines, strategy, seed)?;
            cluster::run_distributed(store, &params, &assignment, Monitor::new().with_test(&test))
        })
        .map_err(to_py)?;
    let log = out
        .log
        .records
        .iter()
        .map(|r| (r.iteration, r.worker, r.sent, r.received, r.flops))
        .collect();
    Ok((PyFactorModel { inner: out.model }, history_dicts(py, &out.history)?, log))
}

#[pymodule]
fn sals(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensorStore>()?;
    m.add_class::<PyFactorModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(factorize, m)?)?;
    m.add_function(wrap_pyfunction!(psgd, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(partition_stats, m)?)?;
    m.add_function(wrap_pyfunction!(run_distributed, m)?)?;
    Ok(())
}
