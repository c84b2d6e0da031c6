//! Method dispatch: local fits on every table of a plan, then combination.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capacity::DEFAULT_MAX_CELLS;
use crate::combine::{combine, threshold_separator_rule, CombinedModel};
use crate::decompose::{collapse_on_plan, decompose, DecompositionPlan};
use crate::design::{LogLinearModel, Term};
use crate::error::{Error, Result};
use crate::forest::ForestConfig;
use crate::importance::{importance_matrix, ImportanceMatrices};
use crate::schema::{ContingencyTable, Dataset};
use crate::select::{
    cross_validate_lambda, default_grid, fit_group_lasso, fit_mle, stepwise_forward, CvOptions, GroupLassoOptions,
};
use crate::design::GeneratingClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "DGL")]
    Dgl,
    #[serde(rename = "DGL:CV")]
    DglCv,
    #[serde(rename = "DGL:F")]
    DglF,
    #[serde(rename = "DSF")]
    Dsf,
    #[serde(rename = "DSF:AIC")]
    DsfAic,
    #[serde(rename = "DF")]
    Df,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Dgl, Method::DglCv, Method::DglF, Method::Dsf, Method::DsfAic, Method::Df];

    /// Command-line spelling.
    pub fn tag(self) -> &'static str {
        match self {
            Method::Dgl => "dgl",
            Method::DglCv => "dgl-cv",
            Method::DglF => "dgl-f",
            Method::Dsf => "dsf",
            Method::DsfAic => "dsf-aic",
            Method::Df => "df",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Dgl => "DGL",
            Method::DglCv => "DGL:CV",
            Method::DglF => "DGL:F",
            Method::Dsf => "DSF",
            Method::DsfAic => "DSF:AIC",
            Method::Df => "DF",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownMethod(pub String);

impl fmt::Display for UnknownMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let known: Vec<&str> = Method::ALL.iter().map(|m| m.tag()).collect();
        write!(f, "unknown method '{}' (expected one of {})", self.0, known.join(", "))
    }
}

impl std::error::Error for UnknownMethod {}

impl FromStr for Method {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s) || m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub method: Method,
    /// Penalty for DGL (required there, ignored elsewhere).
    #[serde(with = "crate::numeric::nonfinite::option")]
    pub lambda: Option<f64>,
    /// Criterion multiplier for DSF (required there; DSF:AIC uses 2, DF 0).
    #[serde(with = "crate::numeric::nonfinite::option")]
    pub s: Option<f64>,
    pub folds: usize,
    pub grid_points: usize,
    pub grid_ratio: f64,
    pub seed: u64,
    pub max_cells: usize,
    pub solver: GroupLassoOptions,
}

impl FitOptions {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lambda: None,
            s: None,
            folds: 10,
            grid_points: 30,
            grid_ratio: 1e-3,
            seed: 0,
            max_cells: DEFAULT_MAX_CELLS,
            solver: GroupLassoOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    Clique,
    Separator,
}

/// Diagnostics of one local fit, stored alongside the global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFitReport {
    pub kind: TableKind,
    pub vars: Vec<usize>,
    pub method: Method,
    #[serde(with = "crate::numeric::nonfinite::option")]
    pub lambda: Option<f64>,
    #[serde(with = "crate::numeric::nonfinite::option")]
    pub s: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    #[serde(with = "crate::numeric::nonfinite::option")]
    pub objective: Option<f64>,
    #[serde(with = "crate::numeric::nonfinite::option")]
    pub kkt_residual: Option<f64>,
    pub df: Option<usize>,
    pub active_terms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub method: Method,
    pub options: FitOptions,
    pub combined: CombinedModel,
    /// The model before the separator rule (DGL:F only).
    pub unthresholded: Option<CombinedModel>,
    pub local: Vec<LocalFitReport>,
}

impl FittedModel {
    pub fn model(&self) -> &LogLinearModel {
        &self.combined.model
    }
}

fn fit_local(table: &ContingencyTable, kind: TableKind, opts: &FitOptions, seed: u64) -> Result<(LogLinearModel, LocalFitReport)> {
    let mut report = LocalFitReport {
        kind,
        vars: table.vars().to_vec(),
        method: opts.method,
        lambda: None,
        s: None,
        converged: true,
        iterations: 0,
        objective: None,
        kkt_residual: None,
        df: None,
        active_terms: 0,
    };
    let model = match opts.method {
        Method::Dgl | Method::DglCv | Method::DglF => {
            let lambda = if opts.method == Method::Dgl {
                opts.lambda.ok_or_else(|| Error::validation("method dgl needs a lambda"))?
            } else {
                let grid = default_grid(table, opts.grid_points, opts.grid_ratio)?;
                let cv = CvOptions {
                    folds: opts.folds,
                    seed,
                    solver: GroupLassoOptions {
                        tol: opts.solver.tol.max(1e-6),
                        ..opts.solver
                    },
                };
                cross_validate_lambda(table, &grid, &cv)?.lambda
            };
            let fit = fit_group_lasso(table, lambda, &opts.solver)?;
            report.lambda = Some(lambda);
            report.converged = fit.converged;
            report.iterations = fit.iterations;
            report.objective = Some(fit.objective);
            report.kkt_residual = Some(fit.kkt_residual);
            fit.model
        }
        Method::Dsf | Method::DsfAic => {
            let s = match opts.method {
                Method::DsfAic => 2.0,
                _ => opts.s.ok_or_else(|| Error::validation("method dsf needs s"))?,
            };
            let fit = stepwise_forward(table, s)?;
            report.s = Some(s);
            report.df = Some(fit.df);
            report.objective = Some(fit.criterion);
            fit.model
        }
        Method::Df => {
            let all = Term::new((0..table.schema().len()).collect());
            let model = fit_mle(table, &GeneratingClass::new(vec![all])?)?;
            report.s = Some(0.0);
            report.df = Some(table.len() - 1);
            model
        }
    };
    report.active_terms = model.active_terms().count();
    Ok((model, report))
}

/// Fits every clique and separator table of `plan` and combines the fits.
/// Local fits run in parallel; table `k` (cliques first) uses seed `seed + k`.
pub fn fit_on_plan(data: &Dataset, plan: &DecompositionPlan, opts: &FitOptions) -> Result<FittedModel> {
    plan.validate()?;
    let tables = collapse_on_plan(data, plan, opts.max_cells)?;
    let nc = tables.cliques.len();
    let jobs: Vec<(&ContingencyTable, TableKind)> = tables
        .cliques
        .iter()
        .map(|t| (t, TableKind::Clique))
        .chain(tables.separators.iter().map(|t| (t, TableKind::Separator)))
        .collect();
    let fits = jobs
        .par_iter()
        .enumerate()
        .map(|(k, (t, kind))| fit_local(t, *kind, opts, opts.seed.wrapping_add(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let (models, local): (Vec<LogLinearModel>, Vec<LocalFitReport>) = fits.into_iter().unzip();
    let combined = combine(data.schema(), &plan.decomposition, &models[..nc], &models[nc..])?;
    let (combined, unthresholded) = if opts.method == Method::DglF {
        (threshold_separator_rule(&combined)?, Some(combined))
    } else {
        (combined, None)
    };
    Ok(FittedModel {
        method: opts.method,
        options: opts.clone(),
        combined,
        unthresholded,
        local,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub forest: ForestConfig,
    pub smax: usize,
    pub fit: FitOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub importance: ImportanceMatrices,
    pub plan: DecompositionPlan,
    pub fitted: FittedModel,
}

/// Importance screening, decomposition and fitting in one go.
pub fn run_pipeline(data: &Dataset, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let importance = importance_matrix(data, &cfg.forest)?;
    let plan = decompose(&importance.rtilde, cfg.smax)?;
    let fitted = fit_on_plan(data, &plan, &cfg.fit)?;
    Ok(PipelineOutput {
        importance,
        plan,
        fitted,
    })
}
