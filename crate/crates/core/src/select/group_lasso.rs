//! Group-lasso penalized multinomial log-linear fits.
//!
//! Minimizes `-sum_i f_i eta_i + log sum_i exp(eta_i) + lambda * sum_a |beta_a|`
//! over the non-intercept blocks, where `f` are the observed cell frequencies
//! and `eta = X beta`. The intercept is not penalized and is recovered at the
//! end as minus the log-normalizer, so the fitted model is normalized.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::design::{hierarchical_closure, Basis, LogLinearModel, Term};
use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, norm2};
use crate::schema::ContingencyTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLassoOptions {
    /// Target KKT residual.
    pub tol: f64,
    /// Budget of proximal-gradient iterations.
    pub max_iter: usize,
    /// Return an error instead of a flagged fit when the budget runs out.
    pub strict: bool,
}

impl Default for GroupLassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100_000,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLassoFit {
    pub lambda: f64,
    /// Normalized model over the table's own schema. Its term set is the
    /// hierarchical closure of the nonzero blocks.
    pub model: LogLinearModel,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

/// Result of a fit on explicitly given block columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFit {
    pub coefficients: Vec<Vec<f64>>,
    pub probabilities: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

enum Design {
    Kron { basis: Basis, positions: Vec<Vec<usize>> },
    /// column-major `m x w` block columns
    Dense(Vec<Vec<f64>>),
}

/// State at one coefficient vector.
struct Point {
    beta: Vec<Vec<f64>>,
    p: Vec<f64>,
    lse: f64,
    smooth: f64,
}

pub(crate) struct Solver {
    f: Vec<f64>,
    design: Design,
    widths: Vec<usize>,
    cur: Point,
    /// Step-size estimate carried across solves.
    lipschitz: f64,
}

fn shrink(z: &[f64], t: f64) -> Vec<f64> {
    let n = norm2(z);
    if n <= t {
        vec![0.0; z.len()]
    } else {
        z.iter().map(|x| x * (1.0 - t / n)).collect()
    }
}

fn penalty(beta: &[Vec<f64>]) -> f64 {
    beta.iter().map(|b| norm2(b)).sum()
}

impl Solver {
    pub(crate) fn for_table(table: &ContingencyTable) -> Result<(Self, Vec<Term>)> {
        if table.total() == 0 {
            return Err(Error::validation("cannot fit an empty table"));
        }
        let basis = Basis::new(table.schema().levels(), table.len().max(1))?;
        let terms: Vec<Term> = Term::new((0..table.schema().len()).collect())
            .subsets()
            .into_iter()
            .filter(|t| !t.is_intercept())
            .collect();
        let positions: Vec<Vec<usize>> = terms.iter().map(|t| basis.block_positions(t)).collect();
        let widths = positions.iter().map(Vec::len).collect();
        let solver = Self::build(table.frequencies(), Design::Kron { basis, positions }, widths);
        Ok((solver, terms))
    }

    fn for_blocks(f: &[f64], blocks: &[Vec<f64>]) -> Result<Self> {
        let m = f.len();
        let mut widths = Vec::new();
        for b in blocks {
            if m == 0 || b.is_empty() || b.len() % m != 0 {
                return Err(Error::validation("block columns must have m rows"));
            }
            widths.push(b.len() / m);
        }
        Ok(Self::build(f.to_vec(), Design::Dense(blocks.to_vec()), widths))
    }

    fn build(f: Vec<f64>, design: Design, widths: Vec<usize>) -> Self {
        let beta = widths.iter().map(|&w| vec![0.0; w]).collect();
        let mut s = Self {
            f,
            design,
            widths,
            cur: Point {
                beta: Vec::new(),
                p: Vec::new(),
                lse: 0.0,
                smooth: 0.0,
            },
            lipschitz: 0.0,
        };
        s.cur = s.point(beta);
        s
    }

    fn m(&self) -> usize {
        self.f.len()
    }

    /// `X beta` over the non-intercept blocks.
    fn synth(&self, beta: &[Vec<f64>]) -> Vec<f64> {
        match &self.design {
            Design::Kron { basis, positions } => {
                let mut coef = vec![0.0; basis.num_cells()];
                for (pos, b) in positions.iter().zip(beta) {
                    for (&j, x) in pos.iter().zip(b) {
                        coef[j] = *x;
                    }
                }
                basis.synthesize(&coef)
            }
            Design::Dense(cols) => {
                let m = self.m();
                let mut eta = vec![0.0; m];
                for (c, b) in cols.iter().zip(beta) {
                    for (k, bk) in b.iter().enumerate() {
                        if *bk != 0.0 {
                            for (e, x) in eta.iter_mut().zip(&c[k * m..(k + 1) * m]) {
                                *e += bk * x;
                            }
                        }
                    }
                }
                eta
            }
        }
    }

    /// `X^T r` split into blocks.
    fn adjoint(&self, r: &[f64]) -> Vec<Vec<f64>> {
        match &self.design {
            Design::Kron { basis, positions } => {
                let g = basis.analyze(r);
                positions.iter().map(|pos| pos.iter().map(|&j| g[j]).collect()).collect()
            }
            Design::Dense(cols) => {
                let m = self.m();
                cols.iter()
                    .map(|c| {
                        c.chunks(m)
                            .map(|col| col.iter().zip(r).map(|(x, y)| x * y).sum())
                            .collect()
                    })
                    .collect()
            }
        }
    }

    fn point(&self, beta: Vec<Vec<f64>>) -> Point {
        let eta = self.synth(&beta);
        let lse = log_sum_exp(&eta);
        let p = eta.iter().map(|e| (e - lse).exp()).collect();
        let fe: f64 = self.f.iter().zip(&eta).map(|(f, e)| f * e).sum();
        Point {
            beta,
            p,
            lse,
            smooth: lse - fe,
        }
    }

    fn gradient(&self, at: &Point) -> Vec<Vec<f64>> {
        let r: Vec<f64> = at.p.iter().zip(&self.f).map(|(p, f)| p - f).collect();
        self.adjoint(&r)
    }

    fn objective(&self, lambda: f64) -> f64 {
        self.cur.smooth + lambda * penalty(&self.cur.beta)
    }

    fn block_residual(g: &[f64], b: &[f64], lambda: f64) -> f64 {
        let nb = norm2(b);
        if nb > 0.0 {
            norm2(&g.iter().zip(b).map(|(g, b)| g + lambda * b / nb).collect::<Vec<_>>())
        } else {
            (norm2(g) - lambda).max(0.0)
        }
    }

    fn kkt(grad: &[Vec<f64>], beta: &[Vec<f64>], lambda: f64) -> f64 {
        grad.iter()
            .zip(beta)
            .map(|(g, b)| Self::block_residual(g, b, lambda))
            .fold(0.0, f64::max)
    }

    /// Largest block gradient norm at the intercept-only fit.
    pub(crate) fn lambda_max(&mut self) -> f64 {
        let zero = self.widths.iter().map(|&w| vec![0.0; w]).collect();
        let at = self.point(zero);
        self.gradient(&at).iter().map(|g| norm2(g)).fold(0.0, f64::max)
    }

    fn set_beta(&mut self, beta: Vec<Vec<f64>>) {
        self.cur = self.point(beta);
    }

    /// Monotone accelerated proximal gradient with backtracking and adaptive
    /// restart; returns (iterations, converged, kkt).
    pub(crate) fn solve(&mut self, lambda: f64, opts: &GroupLassoOptions) -> (usize, bool, f64) {
        let mut grad_x = self.gradient(&self.cur);
        let mut kkt = Self::kkt(&grad_x, &self.cur.beta, lambda);
        if kkt <= opts.tol {
            return (0, true, kkt);
        }
        // X^T diag(p) X is bounded by max(p) X^T X; for the basis X^T X = m I
        let max_p = self.cur.p.iter().copied().fold(0.0, f64::max);
        let mut l = if self.lipschitz > 0.0 {
            self.lipschitz
        } else {
            (self.m() as f64 * max_p).max(1e-12)
        };
        let mut f_x = self.objective(lambda);
        let mut y = self.point(self.cur.beta.clone());
        let mut grad_y = grad_x.clone();
        let mut t = 1.0f64;
        let mut iter = 0;
        while iter < opts.max_iter {
            iter += 1;
            // backtracking on the quadratic upper bound at y
            let z = loop {
                let zb: Vec<Vec<f64>> = y
                    .beta
                    .iter()
                    .zip(&grad_y)
                    .map(|(b, g)| {
                        let step: Vec<f64> = b.iter().zip(g).map(|(b, g)| b - g / l).collect();
                        shrink(&step, lambda / l)
                    })
                    .collect();
                let z = self.point(zb);
                let mut lin = 0.0;
                let mut sq = 0.0;
                for ((zb, yb), g) in z.beta.iter().zip(&y.beta).zip(&grad_y) {
                    for ((a, b), g) in zb.iter().zip(yb).zip(g) {
                        lin += g * (a - b);
                        sq += (a - b) * (a - b);
                    }
                }
                let bound = y.smooth + lin + 0.5 * l * sq;
                if z.smooth <= bound + 1e-15 * y.smooth.abs().max(1.0) || l > 1e300 {
                    break z;
                }
                l *= 2.0;
            };
            let f_z = z.smooth + lambda * penalty(&z.beta);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            // objective differences below rounding carry no information
            let slack = 1e-15 * f_x.abs().max(1.0);
            if f_z <= f_x + slack {
                // momentum from the accepted point
                let yb: Vec<Vec<f64>> = z
                    .beta
                    .iter()
                    .zip(&self.cur.beta)
                    .map(|(a, b)| a.iter().zip(b).map(|(a, b)| a + (t - 1.0) / t_next * (a - b)).collect())
                    .collect();
                debug_assert!(f_z <= self.objective(lambda) + slack);
                self.cur = z;
                f_x = f_z;
                t = t_next;
                y = self.point(yb);
            } else {
                // restart from the best point with a more cautious step
                t = 1.0;
                l *= 2.0;
                y = self.point(self.cur.beta.clone());
            }
            grad_x = self.gradient(&self.cur);
            kkt = Self::kkt(&grad_x, &self.cur.beta, lambda);
            if kkt <= opts.tol {
                self.lipschitz = l;
                return (iter, true, kkt);
            }
            grad_y = self.gradient(&y);
            l *= 0.9;
        }
        self.lipschitz = l;
        (iter, false, kkt)
    }
}

fn finish(table: &ContingencyTable, terms: &[Term], solver: &Solver) -> Result<LogLinearModel> {
    let mut blocks: BTreeMap<Term, Vec<f64>> = BTreeMap::new();
    let nonzero: Vec<Term> = terms
        .iter()
        .zip(&solver.cur.beta)
        .filter(|(_, b)| b.iter().any(|&x| x != 0.0))
        .map(|(t, _)| t.clone())
        .collect();
    let levels = table.schema().levels();
    for t in hierarchical_closure(&nonzero) {
        let w = t.width(levels);
        blocks.insert(t, vec![0.0; w]);
    }
    for (t, b) in terms.iter().zip(&solver.cur.beta) {
        if let Some(slot) = blocks.get_mut(t) {
            slot.clone_from(b);
        }
    }
    blocks.insert(Term::intercept(), vec![-solver.cur.lse]);
    LogLinearModel::new(table.schema().clone(), blocks, Some(0.0))
}

/// Smallest penalty at which every non-intercept block is zero.
pub fn lambda_max(table: &ContingencyTable) -> Result<f64> {
    let (mut solver, _) = Solver::for_table(table)?;
    Ok(solver.lambda_max())
}

pub fn fit_group_lasso(table: &ContingencyTable, lambda: f64, opts: &GroupLassoOptions) -> Result<GroupLassoFit> {
    Ok(group_lasso_path(table, &[lambda], opts)?.pop().expect("one fit"))
}

/// Fits along `lambdas` in the given order, warm-starting each fit from the
/// previous one (decreasing order is the efficient choice).
pub fn group_lasso_path(table: &ContingencyTable, lambdas: &[f64], opts: &GroupLassoOptions) -> Result<Vec<GroupLassoFit>> {
    let (mut solver, terms) = Solver::for_table(table)?;
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::validation(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let (iterations, converged, kkt) = solver.solve(lambda, opts);
        let objective = solver.objective(lambda);
        if !converged {
            if opts.strict {
                return Err(Error::NonConvergence {
                    iterations,
                    last_objective: objective,
                });
            }
            log::warn!("group lasso at lambda {lambda} stopped after {iterations} iterations (kkt {kkt:.3e})");
        }
        out.push(GroupLassoFit {
            lambda,
            model: finish(table, &terms, &solver)?,
            objective,
            iterations,
            converged,
            kkt_residual: kkt,
        });
    }
    Ok(out)
}

/// Warm-started fits on training frequencies, used by cross-validation.
pub(crate) fn path_probabilities(
    table: &ContingencyTable,
    lambdas: &[f64],
    opts: &GroupLassoOptions,
) -> Result<Vec<Vec<f64>>> {
    let (mut solver, _) = Solver::for_table(table)?;
    Ok(lambdas
        .iter()
        .map(|&lambda| {
            solver.solve(lambda, opts);
            solver.cur.p.clone()
        })
        .collect())
}

/// Group lasso on explicit block columns (column-major, `m x w` each) and
/// target frequencies `f`. An all-ones intercept is implicit.
pub fn fit_group_lasso_blocks(
    f: &[f64],
    blocks: &[Vec<f64>],
    lambda: f64,
    opts: &GroupLassoOptions,
    warm: Option<Vec<Vec<f64>>>,
) -> Result<BlockFit> {
    let total: f64 = f.iter().sum();
    if (total - 1.0).abs() > 1e-10 || f.iter().any(|&x| x < 0.0) {
        return Err(Error::validation("target frequencies must be a probability vector"));
    }
    let mut solver = Solver::for_blocks(f, blocks)?;
    if let Some(w) = warm {
        solver.set_beta(w);
    }
    let (iterations, converged, kkt_residual) = solver.solve(lambda, opts);
    if !converged && opts.strict {
        return Err(Error::NonConvergence {
            iterations,
            last_objective: solver.objective(lambda),
        });
    }
    Ok(BlockFit {
        objective: solver.objective(lambda),
        coefficients: solver.cur.beta.clone(),
        probabilities: solver.cur.p.clone(),
        iterations,
        converged,
        kkt_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::build_design;
    use crate::schema::VariableSchema;

    fn table(levels: Vec<usize>, counts: Vec<u64>) -> ContingencyTable {
        ContingencyTable::from_counts(VariableSchema::anonymous(levels).unwrap(), counts).unwrap()
    }

    fn probs(fit: &GroupLassoFit) -> Vec<f64> {
        fit.model.dense_log_probs(1 << 12).unwrap().iter().map(|x| x.exp()).collect()
    }

    #[test]
    fn huge_lambda_gives_uniform() {
        let t = table(vec![2, 3], vec![5, 1, 9, 2, 7, 3]);
        let fit = fit_group_lasso(&t, 1e3, &GroupLassoOptions::default()).unwrap();
        assert!(fit.model.active_terms().next().is_none());
        for p in probs(&fit) {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
        assert_eq!(fit.model.terms().len(), 1);
    }

    #[test]
    fn zero_lambda_is_saturated_mle() {
        let counts = vec![5, 1, 9, 2, 7, 3];
        let t = table(vec![2, 3], counts.clone());
        let opts = GroupLassoOptions {
            tol: 1e-11,
            ..GroupLassoOptions::default()
        };
        let fit = fit_group_lasso(&t, 0.0, &opts).unwrap();
        assert!(fit.converged);
        for (p, c) in probs(&fit).iter().zip(&counts) {
            assert!((p - *c as f64 / 27.0).abs() < 1e-9, "{p} {c} {:?}", (fit.iterations, fit.kkt_residual));
        }
    }

    #[test]
    fn lambda_max_boundary() {
        let t = table(vec![2, 2, 3], (1..=12).map(|x| (x * 7 % 11 + 1) as u64).collect());
        let lm = lambda_max(&t).unwrap();
        assert!(lm > 0.0);
        let at = fit_group_lasso(&t, lm, &GroupLassoOptions::default()).unwrap();
        assert!(at.model.active_terms().next().is_none());
        let below = fit_group_lasso(&t, lm * (1.0 - 1e-6), &GroupLassoOptions::default()).unwrap();
        assert!(below.model.active_terms().next().is_some());
    }

    #[test]
    fn fitted_model_is_normalized_and_block_sparse() {
        let t = table(vec![2, 2, 2], vec![40, 10, 12, 38, 9, 41, 37, 13]);
        let lm = lambda_max(&t).unwrap();
        let fit = fit_group_lasso(&t, 0.3 * lm, &GroupLassoOptions::default()).unwrap();
        let total: f64 = probs(&fit).iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
        for (term, b) in fit.model.terms() {
            if !term.is_intercept() {
                assert!(b.iter().all(|&x| x == 0.0) || b.iter().all(|&x| x != 0.0));
            }
        }
        let eta_z = crate::numeric::log_sum_exp(&fit.model.dense_log_probs(64).unwrap());
        assert!(eta_z.abs() < 1e-12);
    }

    #[test]
    fn dense_blocks_match_basis_path() {
        let counts = vec![3u64, 8, 2, 6, 1, 5];
        let t = table(vec![2, 3], counts.clone());
        let (x, map) = build_design(t.schema(), &Term::new(vec![0, 1]).subsets()).unwrap();
        let blocks: Vec<Vec<f64>> = map.terms[1..]
            .iter()
            .map(|term| {
                let r = map.range_of(term).unwrap();
                r.flat_map(|c| (0..6).map(move |i| (i, c))).map(|(i, c)| x.get(i, c)).collect()
            })
            .collect();
        let f = t.frequencies();
        let lm = lambda_max(&t).unwrap();
        let a = fit_group_lasso(&t, 0.2 * lm, &GroupLassoOptions::default()).unwrap();
        let b = fit_group_lasso_blocks(&f, &blocks, 0.2 * lm, &GroupLassoOptions::default(), None).unwrap();
        assert!((a.objective - b.objective).abs() < 1e-12);
        for (p, q) in probs(&a).iter().zip(&b.probabilities) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_invariance() {
        // 3-level variable: rotate its 2-column main-effect block
        let counts = vec![4u64, 9, 1, 7, 3, 6, 2, 8, 5];
        let t = table(vec![3, 3], counts);
        let (x, map) = build_design(t.schema(), &Term::new(vec![0, 1]).subsets()).unwrap();
        let m = 9;
        let block = |term: &Term| -> Vec<f64> {
            let r = map.range_of(term).unwrap();
            r.flat_map(|c| (0..m).map(move |i| (i, c))).map(|(i, c)| x.get(i, c)).collect()
        };
        let plain: Vec<Vec<f64>> = map.terms[1..].iter().map(block).collect();
        let mut rotated = plain.clone();
        let (s, c) = (0.6f64, 0.8f64);
        let b0 = &plain[0];
        rotated[0] = (0..m)
            .map(|i| c * b0[i] - s * b0[m + i])
            .chain((0..m).map(|i| s * b0[i] + c * b0[m + i]))
            .collect();
        let f = t.frequencies();
        let opts = GroupLassoOptions::default();
        for lambda in [0.05, 0.2, 0.6] {
            let a = fit_group_lasso_blocks(&f, &plain, lambda, &opts, None).unwrap();
            let b = fit_group_lasso_blocks(&f, &rotated, lambda, &opts, None).unwrap();
            for (p, q) in a.probabilities.iter().zip(&b.probabilities) {
                assert!((p - q).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn strict_mode_reports_nonconvergence() {
        let t = table(vec![2, 2], vec![10, 0, 3, 7]);
        let opts = GroupLassoOptions {
            max_iter: 3,
            strict: true,
            ..GroupLassoOptions::default()
        };
        assert!(matches!(fit_group_lasso(&t, 0.0, &opts), Err(Error::NonConvergence { .. })));
        let loose = GroupLassoOptions { strict: false, ..opts };
        assert!(!fit_group_lasso(&t, 0.0, &loose).unwrap().converged);
    }
}
