//! Python bindings. Arrays cross the boundary as flat lists in the
//! core layouts; `HrtfSet.magnitudes` is direction x ear x bin.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use hrtfformer::eval::{self, Method};
use hrtfformer::grid::{SparseMeasurement, SparsityLevel};
use hrtfformer::{io, losses, model, sht, synth, train, HrtfError};

fn py_err(e: HrtfError) -> PyErr {
    match e {
        HrtfError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for hrtfformer::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "SphericalGrid", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyGrid(hrtfformer::SphericalGrid);

#[pymethods]
impl PyGrid {
    #[staticmethod]
    fn equiangular(n_az: usize, n_el: usize) -> PyResult<Self> {
        hrtfformer::make_equiangular_grid(n_az, n_el).py().map(Self)
    }

    /// Grid from (azimuth_deg, elevation_deg) pairs.
    #[staticmethod]
    fn explicit(directions: Vec<(f64, f64)>) -> PyResult<Self> {
        let dirs = directions
            .into_iter()
            .map(|(az, el)| hrtfformer::Direction::new(az, el))
            .collect::<hrtfformer::Result<Vec<_>>>()
            .py()?;
        hrtfformer::SphericalGrid::explicit(dirs).py().map(Self)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn directions(&self) -> Vec<(f64, f64)> {
        self.0
            .directions()
            .iter()
            .map(|d| (d.azimuth_deg(), d.elevation_deg()))
            .collect()
    }
}

#[pyclass(name = "HrtfSet", frozen, from_py_object)]
#[derive(Clone)]
pub struct PySet(hrtfformer::HrtfSet);

#[pymethods]
impl PySet {
    #[new]
    fn new(grid: &PyGrid, sample_rate_hz: f64, n_bins: usize, magnitudes: Vec<f64>) -> PyResult<Self> {
        hrtfformer::HrtfSet::new(grid.0.clone(), sample_rate_hz, n_bins, magnitudes)
            .py()
            .map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::read_container(&path).py().map(Self)
    }

    #[pyo3(signature = (path, force = false))]
    fn save(&self, path: PathBuf, force: bool) -> PyResult<()> {
        io::write_container(&self.0, &path, force).py()
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid(self.0.grid().clone())
    }

    #[getter]
    fn n_bins(&self) -> usize {
        self.0.n_bins()
    }

    #[getter]
    fn n_directions(&self) -> usize {
        self.0.n_directions()
    }

    #[getter]
    fn sample_rate_hz(&self) -> f64 {
        self.0.sample_rate_hz()
    }

    fn magnitudes(&self) -> Vec<f64> {
        self.0.magnitudes().to_vec()
    }

    fn to_db(&self) -> Vec<f64> {
        self.0.to_db()
    }

    /// Farthest-point subset with `level` directions.
    #[pyo3(signature = (level, scheme_seed = 0))]
    fn sparse(&self, level: usize, scheme_seed: u64) -> PyResult<Self> {
        let lv = SparsityLevel::from_count(level).py()?;
        Ok(Self(synth::make_sparse(&self.0, lv, scheme_seed).py()?.set().clone()))
    }

    fn itd_us(&self, direction: usize) -> PyResult<f64> {
        eval::itd_estimate(&self.0, direction).py()
    }
}

fn as_sparse(set: &PySet) -> PyResult<SparseMeasurement> {
    let level = SparsityLevel::from_count(set.0.n_directions()).py()?;
    SparseMeasurement::new(set.0.clone(), level).py()
}

#[pyclass(name = "ShCoefficients", frozen)]
pub struct PyCoeffs(hrtfformer::ShCoefficients);

#[pymethods]
impl PyCoeffs {
    #[getter]
    fn order(&self) -> usize {
        self.0.order()
    }

    /// Ear-major, then bin, then flat SH index.
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    fn evaluate(&self, grid: &PyGrid) -> PyResult<PySet> {
        sht::eval_sh(&self.0, &grid.0).py().map(PySet)
    }
}

#[pyfunction]
#[pyo3(signature = (set, order, ridge_lambda = 0.0))]
fn fit_sh(set: &PySet, order: usize, ridge_lambda: f64) -> PyResult<PyCoeffs> {
    let cfg = hrtfformer::ShFitConfig::new(order, ridge_lambda).py()?;
    sht::fit_sh(&set.0, &cfg).py().map(PyCoeffs)
}

#[pyfunction]
#[pyo3(signature = (seed = 0, band_limit = 7, n_bins = 16, n_az = 16, n_el = 8, population_share = 0.8))]
fn generate_subject(
    seed: u64,
    band_limit: usize,
    n_bins: usize,
    n_az: usize,
    n_el: usize,
    population_share: f64,
) -> PyResult<PySet> {
    let cfg = hrtfformer::SynthConfig {
        seed,
        band_limit,
        n_bins,
        n_az,
        n_el,
        population_share,
        ..Default::default()
    };
    hrtfformer::generate_subject(&cfg).py().map(PySet)
}

#[pyfunction]
fn barycentric_upsample(sparse: &PySet, target: &PyGrid) -> PyResult<PySet> {
    hrtfformer::barycentric_upsample(&as_sparse(sparse)?, &target.0)
        .py()
        .map(PySet)
}

#[pyfunction]
#[pyo3(signature = (sparse, target, order = None, ridge_lambda = None))]
fn sh_baseline_upsample(
    sparse: &PySet,
    target: &PyGrid,
    order: Option<usize>,
    ridge_lambda: Option<f64>,
) -> PyResult<PySet> {
    let sp = as_sparse(sparse)?;
    let (o, l) = sp.level().default_fit();
    let cfg = hrtfformer::ShFitConfig::new(order.unwrap_or(o), ridge_lambda.unwrap_or(l)).py()?;
    hrtfformer::sh_baseline_upsample(&sp, &target.0, &cfg).py().map(PySet)
}

/// Returns (lsd, ild, ndl, mse, total) with the default weights.
#[pyfunction]
fn loss_terms(generated: &PySet, reference: &PySet) -> PyResult<(f64, f64, f64, f64, f64)> {
    let b = hrtfformer::total_loss(&generated.0, &reference.0, &losses::LossWeights::default()).py()?;
    Ok((b.lsd, b.ild, b.ndl, b.mse, b.total))
}

/// Returns (lsd_db, ild_db, itd_us).
#[pyfunction]
fn metrics(generated: &PySet, reference: &PySet) -> PyResult<(f64, f64, f64)> {
    let m = eval::metrics("", &generated.0, &reference.0).py()?;
    Ok((m.lsd_db, m.ild_db, m.itd_us))
}

#[pyclass(name = "Model", frozen)]
pub struct PyModel(model::ModelWeights);

#[pymethods]
impl PyModel {
    /// Freshly initialised desk-sized model for a sparsity level.
    #[staticmethod]
    #[pyo3(signature = (level, n_bins = 16, seed = 0))]
    fn build(level: usize, n_bins: usize, seed: u64) -> PyResult<Self> {
        let lv = SparsityLevel::from_count(level).py()?;
        let (l_in, fit_lambda) = lv.default_fit();
        let mut cfg = model::ModelConfig {
            l_in,
            fit_lambda,
            n_bins,
            ..model::ModelConfig::desk()
        };
        cfg.decoder_stages = cfg.min_decoder_stages();
        model::ModelWeights::build(&cfg, seed).py().map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(io::read_checkpoint(&path).py()?.weights))
    }

    /// Trains on (sparse, dense) pairs and returns the final weights.
    #[pyo3(signature = (pairs, epochs = 10, batch_size = 8, lr = 2e-4, seed = 0))]
    fn fit(&self, pairs: Vec<(PySet, PySet)>, epochs: usize, batch_size: usize, lr: f64, seed: u64) -> PyResult<Self> {
        let cfg = *self.0.config();
        let examples = pairs
            .iter()
            .map(|(s, d)| train::TrainingExample::new(&as_sparse(s)?, &d.0, &cfg).py())
            .collect::<PyResult<Vec<_>>>()?;
        let tcfg = train::TrainConfig {
            epochs,
            batch_size,
            lr,
            seed,
            ..Default::default()
        };
        let start = train::Checkpoint {
            weights: self.0.clone(),
            optimizer: train::AdamState::new(&self.0),
        };
        let out = train::train_from(start, &examples, &[], &tcfg, &mut train::no_checkpoints).py()?;
        Ok(Self(out.last.weights))
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.0.n_parameters()
    }

    fn upsample(&self, sparse: &PySet, target: &PyGrid) -> PyResult<PySet> {
        model::upsample(&self.0, &as_sparse(sparse)?, &target.0).py().map(PySet)
    }

    /// Returns (lsd_db, ild_db, itd_us) averaged over the pairs.
    fn evaluate(&self, pairs: Vec<(PySet, PySet)>) -> PyResult<(f64, f64, f64)> {
        let data = pairs
            .iter()
            .enumerate()
            .map(|(i, (s, d))| {
                Ok(eval::EvalSubject {
                    name: format!("{i}"),
                    sparse: as_sparse(s)?,
                    truth: Some(d.0.clone()),
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let level = data
            .first()
            .map(|s| s.sparse.level())
            .ok_or_else(|| PyValueError::new_err("no pairs"))?;
        let method = Method::Model(Box::new(self.0.clone()));
        let r = eval::evaluate_method(&method, &data, level).py()?;
        Ok((r.aggregate.lsd_db, r.aggregate.ild_db, r.aggregate.itd_us))
    }
}

#[pymodule]
fn hrtfformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PySet>()?;
    m.add_class::<PyCoeffs>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fit_sh, m)?)?;
    m.add_function(wrap_pyfunction!(generate_subject, m)?)?;
    m.add_function(wrap_pyfunction!(barycentric_upsample, m)?)?;
    m.add_function(wrap_pyfunction!(sh_baseline_upsample, m)?)?;
    m.add_function(wrap_pyfunction!(loss_terms, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
