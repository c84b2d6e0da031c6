//! Forward selection of hierarchical terms under `s * k - 2 log l`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ipf::{fit_mle_with, log_likelihood, IpfOptions, MleFit};
use crate::design::{hierarchical_closure, GeneratingClass, LogLinearModel, Term};
use crate::error::{Error, Result};
use crate::schema::ContingencyTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseFit {
    #[serde(with = "crate::numeric::nonfinite")]
    pub s: f64,
    pub class: GeneratingClass,
    pub model: LogLinearModel,
    #[serde(with = "crate::numeric::nonfinite")]
    pub criterion: f64,
    /// Free parameters, intercept excluded.
    pub df: usize,
    pub loglik: f64,
}

fn criterion(s: f64, df: usize, loglik: f64) -> f64 {
    if df == 0 {
        -2.0 * loglik
    } else {
        s * df as f64 - 2.0 * loglik
    }
}

fn df_of(terms: &BTreeSet<Term>, levels: &[usize]) -> usize {
    terms.iter().filter(|t| !t.is_intercept()).map(|t| t.width(levels)).sum()
}

type Candidate = (f64, Term, MleFit);

/// Best single addition. Without `bundle` a term needs all its immediate
/// sub-terms; with it, only two-way terms missing a main effect are tried,
/// and they bring those main effects along.
fn best_addition(
    table: &ContingencyTable,
    terms: &BTreeSet<Term>,
    pool: &[Term],
    s: f64,
    bundle: bool,
    opts: &IpfOptions,
) -> Result<Option<Candidate>> {
    let levels = table.schema().levels();
    let mut best: Option<Candidate> = None;
    for t in pool {
        if terms.contains(t) {
            continue;
        }
        let subs_present = t.vars().iter().all(|&drop| {
            let sub = Term::new(t.vars().iter().copied().filter(|&v| v != drop).collect());
            terms.contains(&sub)
        });
        let eligible = if bundle { t.order() == 2 && !subs_present } else { subs_present };
        if !eligible {
            continue;
        }
        let trial = hierarchical_closure(terms.iter().chain([t]));
        let gen = GeneratingClass::from_terms(&trial);
        match fit_mle_with(table, &gen, opts) {
            Ok(fit) => {
                let c = criterion(s, df_of(&trial, levels), fit.loglik);
                if best.as_ref().is_none_or(|(b, _, _)| c < *b) {
                    best = Some((c, t.clone(), fit));
                }
            }
            Err(Error::MleNonexistent(why)) => log::warn!("skipping candidate {t}: {why}"),
            Err(e) => return Err(e),
        }
    }
    Ok(best)
}

/// Starting from the intercept-only model, repeatedly adds the feasible term
/// that lowers the criterion most, until no addition lowers it. A term is
/// feasible when all its immediate sub-terms are present. When no feasible
/// term helps, two-way terms may enter together with their missing main
/// effects (whose degrees of freedom are charged in the same step), so a
/// variable with a flat margin can still pick up interactions. Candidates
/// without a finite MLE are skipped.
pub fn stepwise_forward(table: &ContingencyTable, s: f64) -> Result<StepwiseFit> {
    if !(s >= 0.0) {
        return Err(Error::validation(format!("s must be >= 0, got {s}")));
    }
    let schema = table.schema();
    let levels = schema.levels();
    let all = Term::new((0..schema.len()).collect());
    let opts = IpfOptions::default();
    if s == 0.0 {
        let class = GeneratingClass::new(vec![all])?;
        let fit = fit_mle_with(table, &class, &opts)?;
        let df = df_of(&class.closure(), levels);
        return Ok(StepwiseFit {
            s,
            criterion: criterion(s, df, fit.loglik),
            class,
            model: fit.model,
            df,
            loglik: fit.loglik,
        });
    }
    let candidates_all: Vec<Term> = all.subsets().into_iter().filter(|t| !t.is_intercept()).collect();
    let mut terms: BTreeSet<Term> = BTreeSet::from([Term::intercept()]);
    let mut class = GeneratingClass::from_terms(&terms);
    let mut current = fit_mle_with(table, &class, &opts)?;
    let mut crit = criterion(s, 0, current.loglik);
    loop {
        // bundled main effects are a fallback for when plain steps stall
        let mut step = None;
        for bundle in [false, true] {
            let best = best_addition(table, &terms, &candidates_all, s, bundle, &opts)?;
            if let Some((c, t, fit)) = best {
                if c < crit - 1e-9 * crit.abs().max(1.0) {
                    step = Some((c, t, fit));
                    break;
                }
            }
        }
        let Some((c, t, fit)) = step else { break };
        terms = hierarchical_closure(terms.iter().chain([&t]));
        class = GeneratingClass::from_terms(&terms);
        crit = c;
        current = fit;
    }
    Ok(StepwiseFit {
        s,
        df: df_of(&terms, levels),
        loglik: log_likelihood(table.counts(), &current.probabilities),
        class,
        model: current.model,
        criterion: crit,
    })
}
