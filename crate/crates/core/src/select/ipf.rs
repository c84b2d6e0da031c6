//! Maximum likelihood for hierarchical log-linear models by iterative
//! proportional fitting.

use std::collections::BTreeMap;

use crate::design::{Basis, GeneratingClass, LogLinearModel, Term};
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::schema::{for_each_cell, ContingencyTable};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpfOptions {
    /// Largest allowed gap between fitted and observed generator margins,
    /// in probability units.
    pub tol: f64,
    pub max_cycles: usize,
}

impl Default for IpfOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_cycles: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    /// Normalized model over the table's schema, terms = closure of the class.
    pub model: LogLinearModel,
    pub probabilities: Vec<f64>,
    pub loglik: f64,
    pub cycles: usize,
}

/// `sum_i n_i log p_i` with `0 log 0 = 0`.
pub fn log_likelihood(counts: &[u64], probs: &[f64]) -> f64 {
    counts
        .iter()
        .zip(probs)
        .filter(|(&n, _)| n > 0)
        .map(|(&n, &p)| n as f64 * p.ln())
        .sum()
}

struct Margin {
    proj: Vec<usize>,
    observed: Vec<f64>,
}

fn margin_for(levels: &[usize], term: &Term, freq: &[f64]) -> Margin {
    let cells: usize = term.vars().iter().map(|&v| levels[v]).product();
    let mut proj = Vec::with_capacity(freq.len());
    let mut observed = vec![0.0; cells];
    for_each_cell(levels, |i, cell| {
        let mut j = 0;
        for &v in term.vars() {
            j = j * levels[v] + cell[v];
        }
        proj.push(j);
        observed[j] += freq[i];
    });
    Margin { proj, observed }
}

pub fn fit_mle(table: &ContingencyTable, gen: &GeneratingClass) -> Result<LogLinearModel> {
    Ok(fit_mle_with(table, gen, &IpfOptions::default())?.model)
}

pub fn fit_mle_with(table: &ContingencyTable, gen: &GeneratingClass, opts: &IpfOptions) -> Result<MleFit> {
    let n = table.total();
    if n == 0 {
        return Err(Error::validation("cannot fit an empty table"));
    }
    let schema = table.schema();
    let levels = schema.levels();
    let p_vars = schema.len();
    for g in gen.generators() {
        crate::schema::check_subset(g.vars(), p_vars)?;
    }
    let freq = table.frequencies();
    let m = freq.len();
    let gens: Vec<&Term> = gen.generators().iter().filter(|g| !g.is_intercept()).collect();
    let mut cycles = 0;
    let probs: Vec<f64> = if gens.iter().any(|g| g.order() == p_vars) {
        if let Some(i) = freq.iter().position(|&f| f == 0.0) {
            return Err(Error::MleNonexistent(format!("saturated model with empty cell {i}")));
        }
        freq.clone()
    } else {
        let margins: Vec<Margin> = gens.iter().map(|g| margin_for(levels, g, &freq)).collect();
        for (g, mg) in gens.iter().zip(&margins) {
            if let Some(j) = mg.observed.iter().position(|&x| x == 0.0) {
                return Err(Error::MleNonexistent(format!("generator {g} has an empty margin cell {j}")));
            }
        }
        let mut p = vec![1.0 / m as f64; m];
        let mut fitted = Vec::new();
        loop {
            let mut gap: f64 = 0.0;
            for mg in &margins {
                fitted.clear();
                fitted.resize(mg.observed.len(), 0.0);
                for (x, &j) in p.iter().zip(&mg.proj) {
                    fitted[j] += x;
                }
                for (o, f) in mg.observed.iter().zip(&fitted) {
                    gap = gap.max((o - f).abs());
                }
                for (x, &j) in p.iter_mut().zip(&mg.proj) {
                    *x *= mg.observed[j] / fitted[j];
                }
            }
            if gap <= opts.tol {
                break;
            }
            cycles += 1;
            if cycles >= opts.max_cycles {
                let min = p.iter().copied().fold(f64::INFINITY, f64::min);
                if min < 1e-12 / m as f64 {
                    return Err(Error::MleNonexistent(
                        "fitted probabilities approach zero (sampling zeros)".into(),
                    ));
                }
                return Err(Error::NonConvergence {
                    iterations: cycles,
                    last_objective: -log_likelihood(table.counts(), &p),
                });
            }
        }
        if p.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::MleNonexistent("fitted probabilities reach zero".into()));
        }
        p
    };
    let model = model_from_probs(table, gen, &probs)?;
    Ok(MleFit {
        loglik: log_likelihood(table.counts(), &probs),
        model,
        probabilities: probs,
        cycles,
    })
}

/// Projects `log p` onto the design and keeps the class's terms.
fn model_from_probs(table: &ContingencyTable, gen: &GeneratingClass, probs: &[f64]) -> Result<LogLinearModel> {
    let schema = table.schema();
    let basis = Basis::new(schema.levels(), probs.len())?;
    let m = probs.len() as f64;
    let logp: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    let coef: Vec<f64> = basis.analyze(&logp).into_iter().map(|c| c / m).collect();
    let mut blocks: BTreeMap<Term, Vec<f64>> = gen
        .closure()
        .into_iter()
        .map(|t| {
            let b = basis.block_positions(&t).into_iter().map(|j| coef[j]).collect();
            (t, b)
        })
        .collect();
    // renormalize after dropping the (numerically zero) terms outside the class
    let mut kron = vec![0.0; probs.len()];
    for (t, b) in &blocks {
        for (j, x) in basis.block_positions(t).into_iter().zip(b) {
            kron[j] = *x;
        }
    }
    let z = log_sum_exp(&basis.synthesize(&kron));
    blocks.get_mut(&Term::intercept()).expect("closure has intercept")[0] -= z;
    LogLinearModel::new(schema.clone(), blocks, Some(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::VariableSchema;

    fn t(v: &[usize]) -> Term {
        Term::new(v.to_vec())
    }

    fn probs_of(model: &LogLinearModel) -> Vec<f64> {
        model.dense_log_probs(1 << 12).unwrap().iter().map(|x| x.exp()).collect()
    }

    #[test]
    fn saturated_equals_proportions() {
        let counts = vec![3u64, 5, 7, 1, 2, 6];
        let table = ContingencyTable::from_counts(VariableSchema::anonymous(vec![2, 3]).unwrap(), counts.clone()).unwrap();
        let fit = fit_mle_with(&table, &GeneratingClass::new(vec![t(&[0, 1])]).unwrap(), &IpfOptions::default()).unwrap();
        for (p, c) in fit.probabilities.iter().zip(&counts) {
            assert_eq!(*p, *c as f64 / 24.0);
        }
        for (p, c) in probs_of(&fit.model).iter().zip(&counts) {
            assert!((p - *c as f64 / 24.0).abs() < 1e-14);
        }
    }

    #[test]
    fn independence_is_outer_product() {
        let counts = vec![3u64, 5, 7, 1, 2, 6];
        let table = ContingencyTable::from_counts(VariableSchema::anonymous(vec![2, 3]).unwrap(), counts).unwrap();
        let fit = fit_mle(&table, &GeneratingClass::new(vec![t(&[0]), t(&[1])]).unwrap()).unwrap();
        let rows = [15.0 / 24.0, 9.0 / 24.0];
        let cols = [4.0 / 24.0, 7.0 / 24.0, 13.0 / 24.0];
        let p = probs_of(&fit);
        for a in 0..2 {
            for b in 0..3 {
                assert!((p[a * 3 + b] - rows[a] * cols[b]).abs() < 1e-12);
            }
        }
        assert!(fit.coefficients(&t(&[0, 1])).is_none());
    }

    #[test]
    fn decomposable_closed_form() {
        let levels = vec![2, 2, 3];
        let counts: Vec<u64> = (0..12).map(|i| (i * 5 % 7 + 1) as u64).collect();
        let n: u64 = counts.iter().sum();
        let table = ContingencyTable::from_counts(VariableSchema::anonymous(levels).unwrap(), counts.clone()).unwrap();
        let fit = fit_mle_with(&table, &GeneratingClass::new(vec![t(&[0, 1]), t(&[1, 2])]).unwrap(), &IpfOptions::default()).unwrap();
        let idx = |a: usize, b: usize, c: usize| a * 6 + b * 3 + c;
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..3 {
                    let n01: u64 = (0..3).map(|c| counts[idx(a, b, c)]).sum();
                    let n12: u64 = (0..2).map(|a| counts[idx(a, b, c)]).sum();
                    let n1: u64 = (0..2).flat_map(|a| (0..3).map(move |c| (a, c))).map(|(a, c)| counts[idx(a, b, c)]).sum();
                    let expect = n01 as f64 * n12 as f64 / (n1 as f64 * n as f64);
                    assert!((fit.probabilities[idx(a, b, c)] - expect).abs() < 1e-12);
                }
            }
        }
        let p = probs_of(&fit.model);
        for (a, b) in p.iter().zip(&fit.probabilities) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_margin_is_nonexistent() {
        let table = ContingencyTable::from_counts(VariableSchema::binary(2), vec![0, 0, 4, 5]).unwrap();
        let gen = GeneratingClass::new(vec![t(&[0]), t(&[1])]).unwrap();
        assert!(matches!(fit_mle(&table, &gen), Err(Error::MleNonexistent(_))));
        let sat = GeneratingClass::new(vec![t(&[0, 1])]).unwrap();
        assert!(matches!(fit_mle(&table, &sat), Err(Error::MleNonexistent(_))));
    }

    #[test]
    fn no_three_way_margins_match() {
        // non-decomposable class: IPF has to iterate
        let counts: Vec<u64> = (0..8).map(|i| [9, 4, 6, 11, 3, 8, 12, 5][i]).collect();
        let table = ContingencyTable::from_counts(VariableSchema::binary(3), counts).unwrap();
        let gen = GeneratingClass::new(vec![t(&[0, 1]), t(&[0, 2]), t(&[1, 2])]).unwrap();
        let fit = fit_mle_with(&table, &gen, &IpfOptions::default()).unwrap();
        assert!(fit.cycles > 1);
        let f = table.frequencies();
        for g in gen.generators() {
            let a = margin_for(&[2, 2, 2], g, &f);
            let b = margin_for(&[2, 2, 2], g, &fit.probabilities);
            for (x, y) in a.observed.iter().zip(&b.observed) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
