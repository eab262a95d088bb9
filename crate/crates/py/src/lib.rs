// pyo3 0.22 macro expansion trips this lint on every PyResult.
#![allow(clippy::useless_conversion)]

use dgp_core::dataset::{generate, FieldSpec, Simulator};
use dgp_core::darcy;
use dgp_core::deepgp::{train_deep, DeepGpModel, DeepOptions, Predictor};
use dgp_core::error::Error;
use dgp_core::model_io::{load_model, save_model};
use dgp_core::random_field::Grid2D;
use dgp_core::uq::{uq_report, InputDistribution, UqOptions};
use nalgebra::DMatrix;
use numpy::ndarray::Array2;
use numpy::{IntoPyArray, PyArray1, PyArray2, PyReadonlyArray2};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type ArrayPair<'py> = (Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>);

fn to_py_err(e: Error) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_matrix(a: &PyReadonlyArray2<f64>) -> DMatrix<f64> {
    let a = a.as_array();
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn to_array<'py>(py: Python<'py>, m: &DMatrix<f64>) -> Bound<'py, PyArray2<f64>> {
    Array2::from_shape_fn(m.shape(), |(i, j)| m[(i, j)]).into_pyarray_bound(py)
}

/// Relative L² pressure error of the flow solver on the manufactured problem.
#[pyfunction]
fn manufactured_error(n: usize) -> PyResult<f64> {
    darcy::manufactured_error(Grid2D::square(n).map_err(to_py_err)?).map_err(to_py_err)
}

/// Random permeability field and flow problem.
#[pyclass(name = "FieldSpec")]
#[derive(Clone)]
struct FieldSpecPy(FieldSpec);

#[pymethods]
impl FieldSpecPy {
    #[new]
    #[pyo3(signature = (grid=64, out_grid=32, k_xi=50, correlation=0.1, sg=1.0, mean=0.0, rate=10.0, width=0.125))]
    #[allow(clippy::too_many_arguments)]
    fn new(grid: usize, out_grid: usize, k_xi: usize, correlation: f64, sg: f64, mean: f64, rate: f64, width: f64) -> PyResult<Self> {
        let spec = FieldSpec {
            grid,
            out_grid,
            k_xi,
            lambda: correlation,
            sg,
            mean,
            rate,
            width,
        };
        spec.validate().map_err(to_py_err)?;
        Ok(Self(spec))
    }

    /// Dictionary with `K`, `p`, `ux` and `uy`, one sample per row.
    fn generate<'py>(&self, py: Python<'py>, n: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let sim = Simulator::new(&self.0).map_err(to_py_err)?;
        let d = py.allow_threads(|| generate(&sim, n, seed)).map_err(to_py_err)?;
        let out = PyDict::new_bound(py);
        out.set_item("K", to_array(py, &d.permeability))?;
        out.set_item("p", to_array(py, &d.pressure))?;
        out.set_item("ux", to_array(py, &d.vel_x))?;
        out.set_item("uy", to_array(py, &d.vel_y))?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let s = &self.0;
        format!(
            "FieldSpec(grid={}, out_grid={}, k_xi={}, correlation={}, sg={}, mean={}, rate={}, width={})",
            s.grid, s.out_grid, s.k_xi, s.lambda, s.sg, s.mean, s.rate, s.width
        )
    }
}

/// Trained deep GP surrogate.
#[pyclass(name = "DeepGP")]
struct DeepGp {
    model: DeepGpModel,
    predictor: Predictor,
}

impl DeepGp {
    fn wrap(model: DeepGpModel) -> PyResult<Self> {
        let predictor = Predictor::new(&model).map_err(to_py_err)?;
        Ok(Self { model, predictor })
    }
}

#[pymethods]
impl DeepGp {
    #[staticmethod]
    #[pyo3(signature = (x, y, dims, inducing, iters=100, seed=0, log_inputs=false, shared_lengthscale=false))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        x: PyReadonlyArray2<f64>,
        y: PyReadonlyArray2<f64>,
        dims: Vec<usize>,
        inducing: Vec<usize>,
        iters: usize,
        seed: u64,
        log_inputs: bool,
        shared_lengthscale: bool,
    ) -> PyResult<Self> {
        let (x, y) = (to_matrix(&x), to_matrix(&y));
        let mut opts = DeepOptions::new(dims, inducing, iters, seed);
        opts.log_inputs = log_inputs;
        opts.shared_lengthscale = shared_lengthscale;
        let model = py.allow_threads(|| train_deep(&x, &y, &opts)).map_err(to_py_err)?;
        Self::wrap(model)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Self::wrap(load_model(path).map_err(to_py_err)?)
    }

    fn save(&self, path: &str) -> PyResult<Vec<String>> {
        let files = save_model(&self.model, path).map_err(to_py_err)?;
        Ok(files.iter().map(|p| p.display().to_string()).collect())
    }

    /// Predictive mean and variance, each `n × outputs`.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        x: PyReadonlyArray2<f64>,
    ) -> PyResult<ArrayPair<'py>> {
        let x = to_matrix(&x);
        let (m, v) = py.allow_threads(|| self.predictor.predict(&x)).map_err(to_py_err)?;
        Ok((to_array(py, &m), to_array(py, &v)))
    }

    /// ARD weights of each hidden layer.
    fn ard_weights(&self) -> Vec<Vec<f64>> {
        self.model.hidden_layers.iter().map(|l| l.kernel.weights.clone()).collect()
    }

    fn elbo_trace<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray1<f64>> {
        self.model.training_meta.elbo_trace.clone().into_pyarray_bound(py)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.model.dims.clone()
    }

    /// Mean-of-mean, mean-of-variance and error-bar fields over repeated
    /// realizations at inputs drawn from `spec`.
    #[pyo3(signature = (spec, inner=120, repeats=100, seed=0))]
    fn uq<'py>(
        &self,
        py: Python<'py>,
        spec: &FieldSpecPy,
        inner: usize,
        repeats: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let sim = Simulator::new(&spec.0).map_err(to_py_err)?;
        let dist = InputDistribution::KleUniform(sim.kle);
        let opts = UqOptions::new(inner, repeats, seed);
        let r = py.allow_threads(|| uq_report(&self.predictor, &dist, &opts)).map_err(to_py_err)?;
        let out = PyDict::new_bound(py);
        out.set_item("mean_of_mean", r.mean_of_mean.into_pyarray_bound(py))?;
        out.set_item("mean_of_variance", r.mean_of_variance.into_pyarray_bound(py))?;
        out.set_item("errorbar_mean", r.errorbar_mean.into_pyarray_bound(py))?;
        out.set_item("errorbar_variance", r.errorbar_variance.into_pyarray_bound(py))?;
        Ok(out)
    }
}

#[pymodule]
pub fn dgp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<FieldSpecPy>()?;
    m.add_class::<DeepGp>()?;
    m.add_function(wrap_pyfunction!(manufactured_error, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
