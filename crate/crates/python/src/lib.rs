use curveclust_core::bayes::{cluster_bands, gcv_fit_band, residual_variance, CurveBand, CurveQuery};
use curveclust_core::gcv::{minimize_gcv, GcvOptions, GcvResult};
use curveclust_core::mixture::{run_em, select_k, ClusteringResult, MixtureConfig};
use curveclust_core::simbench::{adjusted_rand as ari, generate, SimScenario};
use curveclust_core::{
    dataset_from_records, load_csv, save_csv, Error, ErrorClass, FunctionalDataset, LoadOptions, RandomEffectKind,
    Record, Structure,
};
use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Data => PyValueError::new_err(msg),
        ErrorClass::Numerical => PyArithmeticError::new_err(msg),
        ErrorClass::Convergence => PyRuntimeError::new_err(msg),
    }
}

fn structure(name: Option<&str>) -> PyResult<Option<Structure>> {
    match name {
        None => Ok(None),
        Some("additive") => Ok(Some(Structure::Additive)),
        Some("interaction") => Ok(Some(Structure::Interaction)),
        Some(other) => Err(PyValueError::new_err(format!("unknown structure `{other}`"))),
    }
}

fn random_effect(name: Option<&str>) -> PyResult<Option<RandomEffectKind>> {
    match name {
        None | Some("none") => Ok(None),
        Some("intercept") => Ok(Some(RandomEffectKind::Intercept)),
        Some("intercept_slope") => Ok(Some(RandomEffectKind::InterceptSlope)),
        Some(other) => Err(PyValueError::new_err(format!("unknown random effect `{other}`"))),
    }
}

/// Functional observations grouped by subject.
#[pyclass(frozen)]
pub struct Dataset {
    inner: FunctionalDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (path, structure=None))]
    fn from_csv(path: &str, structure: Option<&str>) -> PyResult<Self> {
        let opts = LoadOptions { structure: self::structure(structure)?, ..LoadOptions::default() };
        load_csv(path, &opts).map(|inner| Self { inner }).map_err(py_err)
    }

    /// Columns as parallel lists; factor levels start at 1.
    #[staticmethod]
    #[pyo3(signature = (subjects, times, responses, factors=None, structure=None))]
    fn from_arrays(
        subjects: Vec<String>,
        times: Vec<f64>,
        responses: Vec<f64>,
        factors: Option<Vec<usize>>,
        structure: Option<&str>,
    ) -> PyResult<Self> {
        let n = subjects.len();
        if times.len() != n || responses.len() != n || factors.as_ref().is_some_and(|f| f.len() != n) {
            return Err(PyValueError::new_err("columns differ in length"));
        }
        let records: Vec<Record> = (0..n)
            .map(|i| Record {
                subject: subjects[i].clone(),
                time: times[i],
                tau: factors.as_ref().map_or(1, |f| f[i]),
                y: responses[i],
            })
            .collect();
        let opts = LoadOptions { structure: self::structure(structure)?, ..LoadOptions::default() };
        dataset_from_records(&records, factors.is_some(), &opts).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        save_csv(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn n_subjects(&self) -> usize {
        self.inner.n_subjects()
    }

    #[getter]
    fn total_obs(&self) -> usize {
        self.inner.total_obs
    }

    #[getter]
    fn factor_levels(&self) -> usize {
        self.inner.domain.factor_levels
    }

    #[getter]
    fn subject_ids(&self) -> Vec<String> {
        self.inner.subjects.iter().map(|s| s.id.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n_subjects()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(subjects={}, observations={})", self.inner.n_subjects(), self.inner.total_obs)
    }
}

/// Pointwise posterior mean with a normal band, on the original time scale.
#[pyclass(frozen, get_all)]
pub struct Band {
    factor: Vec<usize>,
    time: Vec<f64>,
    mean: Vec<f64>,
    variance: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    clipped: usize,
}

impl Band {
    fn new(b: CurveBand, scale: f64) -> Self {
        Self {
            factor: b.grid.iter().map(|x| x.tau).collect(),
            time: b.grid.iter().map(|x| x.t * scale).collect(),
            mean: b.mean,
            variance: b.variance,
            lower: b.lower,
            upper: b.upper,
            clipped: b.clipped,
        }
    }
}

#[pymethods]
impl Band {
    fn __len__(&self) -> usize {
        self.mean.len()
    }
}

/// Single-curve smoothing-spline fit with GCV-tuned smoothing.
#[pyclass(frozen)]
pub struct Fit {
    dataset: FunctionalDataset,
    knot_cap: usize,
    result: GcvResult,
}

#[pymethods]
impl Fit {
    #[getter]
    fn lambda_(&self) -> f64 {
        self.result.point.lambda()
    }

    #[getter]
    fn theta_ratio(&self) -> Option<f64> {
        self.result.point.log_theta_ratio.map(|_| self.result.point.theta_ratio())
    }

    #[getter]
    fn gcv(&self) -> f64 {
        self.result.score
    }

    #[getter]
    fn trace(&self) -> f64 {
        self.result.solution.trace
    }

    #[getter]
    fn sigma2(&self) -> PyResult<f64> {
        residual_variance(&self.result.solution).map_err(py_err)
    }

    #[getter]
    fn fitted(&self) -> Vec<f64> {
        self.result.solution.fitted.iter().copied().collect()
    }

    #[pyo3(signature = (n_t=101, alpha=0.05))]
    fn band(&self, n_t: usize, alpha: f64) -> PyResult<Band> {
        let (knots, _) = self.dataset.knots_capped(self.knot_cap);
        let q = CurveQuery::regular(self.dataset.domain.factor_levels, n_t, alpha);
        let b = gcv_fit_band(self.dataset.domain, &knots, &self.result, &q).map_err(py_err)?;
        Ok(Band::new(b, self.dataset.time_scale()))
    }
}

/// Mixture of smoothing-spline mixed models fitted by EM.
#[pyclass(frozen)]
pub struct Clustering {
    dataset: FunctionalDataset,
    knot_cap: usize,
    result: ClusteringResult,
    bic_table: Vec<(usize, Option<f64>)>,
}

#[pymethods]
impl Clustering {
    #[getter]
    fn k(&self) -> usize {
        self.result.state.k()
    }

    /// 0-based cluster of each subject.
    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.result.hard_labels.clone()
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        let w = &self.result.state.w;
        (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect()
    }

    #[getter]
    fn mixing(&self) -> Vec<f64> {
        self.result.state.p.clone()
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.result.state.sigma2
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.result.state.loglik
    }

    #[getter]
    fn bic(&self) -> f64 {
        self.result.bic
    }

    /// `(K, BIC)` for every K tried; `None` where the fit failed.
    #[getter]
    fn bic_table(&self) -> Vec<(usize, Option<f64>)> {
        self.bic_table.clone()
    }

    #[getter]
    fn history(&self) -> Vec<f64> {
        self.result.history.clone()
    }

    #[pyo3(signature = (n_t=101, alpha=0.05))]
    fn bands(&self, n_t: usize, alpha: f64) -> PyResult<Vec<Band>> {
        let (knots, _) = self.dataset.knots_capped(self.knot_cap);
        let q = CurveQuery::regular(self.dataset.domain.factor_levels, n_t, alpha);
        let bands = cluster_bands(&self.result, self.dataset.domain, &knots, &q).map_err(py_err)?;
        Ok(bands.into_iter().map(|b| Band::new(b, self.dataset.time_scale())).collect())
    }
}

#[pyfunction]
#[pyo3(signature = (dataset, random_effect=Some("intercept"), knot_cap=200))]
fn fit(py: Python<'_>, dataset: &Dataset, random_effect: Option<&str>, knot_cap: usize) -> PyResult<Fit> {
    let re = self::random_effect(random_effect)?;
    let ds = dataset.inner.clone();
    let result = py.detach(|| minimize_gcv(&ds, re, knot_cap, &GcvOptions::default())).map_err(py_err)?;
    Ok(Fit { dataset: ds, knot_cap, result })
}

/// Fits K clusters, or every K in `k_range` (inclusive) keeping the lowest BIC.
#[pyfunction]
#[pyo3(signature = (dataset, k=4, k_range=None, seed=1, chains=3, random_effect=Some("intercept")))]
fn cluster(
    py: Python<'_>,
    dataset: &Dataset,
    k: usize,
    k_range: Option<(usize, usize)>,
    seed: u64,
    chains: usize,
    random_effect: Option<&str>,
) -> PyResult<Clustering> {
    let config = MixtureConfig { k, seed, chains, random_effect: self::random_effect(random_effect)?, ..MixtureConfig::default() };
    let ds = dataset.inner.clone();
    let knot_cap = config.knot_cap;
    let (result, bic_table) = py
        .detach(|| -> Result<_, Error> {
            match k_range {
                None => {
                    let r = run_em(&ds, &config)?;
                    let table = vec![(k, Some(r.bic))];
                    Ok((r, table))
                }
                Some((lo, hi)) => {
                    let ks: Vec<usize> = (lo..=hi).collect();
                    let (best, runs) = select_k(&ds, &ks, &config)?;
                    let table = runs.iter().map(|(k, r)| (*k, r.as_ref().ok().map(|r| r.bic))).collect();
                    let r = runs.into_iter().find_map(|(k, r)| r.ok().filter(|_| k == best)).ok_or(Error::AllChainsFailed)?;
                    Ok((r, table))
                }
            }
        })
        .map_err(py_err)?;
    Ok(Clustering { dataset: ds, knot_cap, result, bic_table })
}

/// Default four-cluster scenario; returns the dataset and 0-based true labels.
#[pyfunction]
#[pyo3(signature = (seed=1))]
fn simulate(seed: u64) -> PyResult<(Dataset, Vec<usize>)> {
    let sim = generate(&SimScenario::with_seed(seed)).map_err(py_err)?;
    Ok((Dataset { inner: sim.dataset }, sim.labels))
}

#[pyfunction]
fn adjusted_rand(u: Vec<usize>, v: Vec<usize>) -> PyResult<f64> {
    ari(&u, &v).map_err(py_err)
}

#[pymodule]
fn curveclust(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Band>()?;
    m.add_class::<Fit>()?;
    m.add_class::<Clustering>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand, m)?)?;
    Ok(())
}
