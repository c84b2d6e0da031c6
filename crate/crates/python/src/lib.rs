use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use cf::combine::extract_graph;
use cf::decompose::decompose as run_decompose;
use cf::eval::{empirical_kl_model, roc_sweep};
use cf::forest::ForestConfig;
use cf::graph::Graph;
use cf::importance::importance_matrix;
use cf::io::{self, ModelDocument, PlanDocument};
use cf::junction::JunctionTree;
use cf::pipeline::{fit_on_plan, FitOptions, Method};
use cf::schema::VariableSchema;
use cf::simulate::{random_decomposable_model, SimulationConfig};
use cf::Error;

create_exception!(cliquefit, CliquefitError, PyException);
create_exception!(cliquefit, ValidationError, CliquefitError);
create_exception!(cliquefit, CapacityError, CliquefitError);
create_exception!(cliquefit, NonConvergenceError, CliquefitError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Capacity { .. } => CapacityError::new_err(msg),
        Error::NonConvergence { .. } => NonConvergenceError::new_err(msg),
        _ => ValidationError::new_err(msg),
    }
}

/// Observations with one integer level code per variable.
#[pyclass(frozen, module = "cliquefit")]
struct Dataset {
    inner: cf::schema::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(names: Vec<String>, levels: Vec<usize>, rows: Vec<Vec<usize>>) -> PyResult<Self> {
        let schema = VariableSchema::new(names, levels).map_err(to_py)?;
        let inner = cf::schema::Dataset::new(schema, &rows).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, schema=None))]
    fn read_csv(path: PathBuf, schema: Option<PathBuf>) -> PyResult<Self> {
        let schema = schema.map(|p| io::read_schema(&p)).transpose().map_err(to_py)?;
        let inner = io::read_dataset(&path, schema.as_ref()).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        io::write_dataset(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.schema().names().to_vec()
    }

    #[getter]
    fn levels(&self) -> Vec<usize> {
        self.inner.schema().levels().to_vec()
    }

    fn rows(&self) -> Vec<Vec<u16>> {
        self.inner.rows().map(<[u16]>::to_vec).collect()
    }
}

/// A normalized global model with the decomposition that covers it.
#[pyclass(frozen, module = "cliquefit")]
struct Model {
    doc: ModelDocument,
}

impl Model {
    fn tree(&self) -> PyResult<JunctionTree> {
        JunctionTree::calibrate(self.doc.model(), self.doc.decomposition()).map_err(to_py)
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            doc: io::read_model(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let doc = serde_json::from_str(text).map_err(|e| ValidationError::new_err(e.to_string()))?;
        Ok(Self { doc })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_json(&path, &self.doc).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.doc).map_err(|e| CliquefitError::new_err(e.to_string()))
    }

    /// Method label of a fitted model, `None` for other documents.
    #[getter]
    fn method(&self) -> Option<String> {
        match &self.doc {
            ModelDocument::Fitted(f) => Some(f.method.label().to_string()),
            _ => None,
        }
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.doc.model().schema().names().to_vec()
    }

    /// Nonzero blocks as `(variables, coefficients)`, intercept first.
    fn terms(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        let m = self.doc.model();
        m.terms()
            .iter()
            .filter(|(t, _)| t.is_intercept() || m.block_norm(t) > 0.0)
            .map(|(t, b)| (t.vars().to_vec(), b.clone()))
            .collect()
    }

    /// Edges of the interaction graph.
    fn edges(&self) -> Vec<(usize, usize)> {
        extract_graph(self.doc.model()).edges()
    }

    fn log_prob(&self, cell: Vec<usize>) -> PyResult<f64> {
        self.doc.model().schema().check_cell(&cell).map_err(to_py)?;
        Ok(self.tree()?.log_prob(&cell))
    }

    /// Probabilities of `cells` on the margin `variables` (sorted indices).
    #[pyo3(signature = (variables, cells, max_cells=1 << 24))]
    fn probabilities(&self, variables: Vec<usize>, cells: Vec<Vec<usize>>, max_cells: usize) -> PyResult<Vec<f64>> {
        self.tree()?.marginal_query(&variables, &cells, max_cells).map_err(to_py)
    }

    fn sample(&self, py: Python<'_>, n: usize, seed: u64) -> PyResult<Dataset> {
        let tree = self.tree()?;
        let inner = py.detach(|| tree.sample(n, seed));
        Ok(Dataset { inner })
    }

    /// Monte-Carlo cross-entropy on a reference sample.
    fn kl(&self, py: Python<'_>, reference: &Dataset) -> PyResult<f64> {
        let (model, decomp) = (self.doc.model(), self.doc.decomposition());
        py.detach(|| empirical_kl_model(&reference.inner, model, decomp))
            .map(|k| k.value)
            .map_err(to_py)
    }

    /// ROC points `(threshold, fpr, tpr)` against a true edge list, and the AUC.
    fn roc(&self, true_edges: Vec<(usize, usize)>) -> PyResult<(Vec<(f64, f64, f64)>, f64)> {
        let p = self.doc.model().schema().len();
        if true_edges.iter().any(|&(u, v)| u >= p || v >= p || u == v) {
            return Err(ValidationError::new_err("true edges must join two distinct variables"));
        }
        let rep = roc_sweep(self.doc.model(), &Graph::from_edges(p, &true_edges)).map_err(to_py)?;
        Ok((rep.roc.iter().map(|r| (r.threshold, r.fpr, r.tpr)).collect(), rep.auc))
    }
}

fn forest(trees: usize, seed: u64, sample_size: Option<usize>, max_oob: Option<usize>) -> ForestConfig {
    ForestConfig {
        n_trees: trees,
        sample_size,
        max_oob,
        seed,
        ..ForestConfig::default()
    }
}

/// Random decomposable pairwise model.
#[pyfunction]
#[pyo3(signature = (num_vars=15, levels=2, max_clique=3, seed=0))]
fn simulate(num_vars: usize, levels: usize, max_clique: usize, seed: u64) -> PyResult<Model> {
    let sim = random_decomposable_model(&SimulationConfig {
        num_vars,
        levels,
        max_clique,
        seed,
        ..SimulationConfig::default()
    })
    .map_err(to_py)?;
    Ok(Model {
        doc: ModelDocument::Simulated(Box::new(sim)),
    })
}

/// Node-wise forest importance; returns `(M, R, R_tilde)`.
#[pyfunction]
#[pyo3(signature = (data, seed, trees=500, sample_size=None, max_oob=None))]
#[allow(clippy::type_complexity)]
fn importance(
    py: Python<'_>,
    data: &Dataset,
    seed: u64,
    trees: usize,
    sample_size: Option<usize>,
    max_oob: Option<usize>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<usize>>, Vec<Vec<f64>>)> {
    let cfg = forest(trees, seed, sample_size, max_oob);
    let imp = py.detach(|| importance_matrix(&data.inner, &cfg)).map_err(to_py)?;
    Ok((imp.m, imp.r, imp.rtilde))
}

/// Thinning and split-off on a symmetric rank matrix; returns the plan JSON.
#[pyfunction]
#[pyo3(signature = (rtilde, smax=10, names=None))]
fn decompose(rtilde: Vec<Vec<f64>>, smax: usize, names: Option<Vec<String>>) -> PyResult<String> {
    let plan = run_decompose(&rtilde, smax).map_err(to_py)?;
    let variables = names.unwrap_or_else(|| (1..=rtilde.len()).map(|i| format!("X{i}")).collect());
    serde_json::to_string(&PlanDocument { variables, plan }).map_err(|e| CliquefitError::new_err(e.to_string()))
}

/// Fits a model with one of dgl, dgl-cv, dgl-f, dsf, dsf-aic, df. Without a
/// plan, importance screening and decomposition run first.
#[pyfunction]
#[pyo3(signature = (data, method, seed, plan=None, smax=10, lam=None, s=None, folds=10, trees=500, sample_size=None, max_oob=None))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    data: &Dataset,
    method: &str,
    seed: u64,
    plan: Option<&str>,
    smax: usize,
    lam: Option<f64>,
    s: Option<f64>,
    folds: usize,
    trees: usize,
    sample_size: Option<usize>,
    max_oob: Option<usize>,
) -> PyResult<Model> {
    let method: Method = method.parse().map_err(|e: cf::pipeline::UnknownMethod| ValidationError::new_err(e.to_string()))?;
    let plan = plan
        .map(|text| serde_json::from_str::<PlanDocument>(text).map_err(|e| ValidationError::new_err(e.to_string())))
        .transpose()?;
    let opts = FitOptions {
        lambda: lam,
        s,
        folds,
        seed,
        ..FitOptions::new(method)
    };
    let cfg = forest(trees, seed, sample_size, max_oob);
    let fitted = py
        .detach(|| {
            let plan = match plan {
                Some(doc) => doc.plan,
                None => run_decompose(&importance_matrix(&data.inner, &cfg)?.rtilde, smax)?,
            };
            fit_on_plan(&data.inner, &plan, &opts)
        })
        .map_err(to_py)?;
    Ok(Model {
        doc: ModelDocument::Fitted(Box::new(fitted)),
    })
}

#[pymodule]
fn cliquefit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(importance, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    let py = m.py();
    m.add("CliquefitError", py.get_type::<CliquefitError>())?;
    m.add("ValidationError", py.get_type::<ValidationError>())?;
    m.add("CapacityError", py.get_type::<CapacityError>())?;
    m.add("NonConvergenceError", py.get_type::<NonConvergenceError>())?;
    Ok(())
}
