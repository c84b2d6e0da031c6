//! Assembling clique and separator fits into one global model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::design::{LogLinearModel, Term};
use crate::error::{Error, Result};
use crate::graph::{CliqueDecomposition, Graph};
use crate::junction::normalize;
use crate::schema::VariableSchema;

/// Where a global term's block came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermProvenance {
    pub term: Term,
    /// Cliques whose fit contains the term (weight +1 each).
    pub cliques: Vec<usize>,
    /// Separators whose fit contains the term, with their multiplicity.
    pub separators: Vec<(usize, usize)>,
    /// The term lies inside some separator of the decomposition.
    pub separator_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedModel {
    pub model: LogLinearModel,
    pub decomposition: CliqueDecomposition,
    pub provenance: Vec<TermProvenance>,
    /// Block-norm threshold applied by the separator rule, if any.
    #[serde(with = "crate::numeric::nonfinite::option")]
    pub threshold: Option<f64>,
}

fn inside_separator(term: &Term, decomp: &CliqueDecomposition) -> bool {
    !term.is_intercept() && decomp.separators.iter().any(|s| term.is_subset_of(&s.vars))
}

fn check_local(fit: &LogLinearModel, vars: &[usize], schema: &VariableSchema, what: &str) -> Result<()> {
    let levels = schema.levels();
    let local = fit.schema().levels();
    if local.len() != vars.len() || vars.iter().zip(local).any(|(&v, &k)| levels[v] != k) {
        return Err(Error::validation(format!(
            "{what} fit over levels {local:?} does not match variables {vars:?}"
        )));
    }
    if fit.log_partition().is_some_and(|z| z != 0.0) {
        return Err(Error::validation(format!("{what} fit must be normalized into its intercept")));
    }
    Ok(())
}

fn accumulate(blocks: &mut BTreeMap<Term, Vec<f64>>, term: &Term, beta: &[f64], w: f64) {
    let b = blocks.entry(term.clone()).or_insert_with(|| vec![0.0; beta.len()]);
    for (x, y) in b.iter_mut().zip(beta) {
        *x += w * y;
    }
}

fn provenance_entry<'a>(
    prov: &'a mut BTreeMap<Term, TermProvenance>,
    term: Term,
    decomp: &CliqueDecomposition,
) -> &'a mut TermProvenance {
    prov.entry(term.clone()).or_insert_with(|| TermProvenance {
        separator_only: inside_separator(&term, decomp),
        term,
        cliques: Vec::new(),
        separators: Vec::new(),
    })
}

/// Adds clique blocks and subtracts separator blocks weighted by their
/// multiplicity, then normalizes on the decomposition. Local fits are over
/// their own table schema (variables in sorted order) and must carry their
/// normalizing constant in the intercept.
pub fn combine(
    schema: &VariableSchema,
    decomposition: &CliqueDecomposition,
    clique_fits: &[LogLinearModel],
    separator_fits: &[LogLinearModel],
) -> Result<CombinedModel> {
    if clique_fits.len() != decomposition.cliques.len() || separator_fits.len() != decomposition.separators.len() {
        return Err(Error::validation(format!(
            "expected {} clique and {} separator fits, got {} and {}",
            decomposition.cliques.len(),
            decomposition.separators.len(),
            clique_fits.len(),
            separator_fits.len()
        )));
    }
    if decomposition.vertices() != (0..schema.len()).collect::<Vec<_>>() {
        return Err(Error::validation("decomposition must cover every variable"));
    }
    let mut blocks: BTreeMap<Term, Vec<f64>> = BTreeMap::new();
    let mut prov: BTreeMap<Term, TermProvenance> = BTreeMap::new();
    for (c, (vars, fit)) in decomposition.cliques.iter().zip(clique_fits).enumerate() {
        check_local(fit, vars, schema, "clique")?;
        for (t, beta) in fit.terms() {
            let g = t.mapped(vars);
            accumulate(&mut blocks, &g, beta, 1.0);
            provenance_entry(&mut prov, g, decomposition).cliques.push(c);
        }
    }
    for (s, (sep, fit)) in decomposition.separators.iter().zip(separator_fits).enumerate() {
        check_local(fit, &sep.vars, schema, "separator")?;
        for (t, beta) in fit.terms() {
            let g = t.mapped(&sep.vars);
            accumulate(&mut blocks, &g, beta, -(sep.index as f64));
            provenance_entry(&mut prov, g, decomposition).separators.push((s, sep.index));
        }
    }
    blocks.entry(Term::intercept()).or_insert_with(|| vec![0.0]);
    let mut model = LogLinearModel::new(schema.clone(), blocks, None)?;
    normalize(&mut model, decomposition)?;
    Ok(CombinedModel {
        model,
        decomposition: decomposition.clone(),
        provenance: prov.into_values().collect(),
        threshold: None,
    })
}

impl CombinedModel {
    /// Wraps an existing global model; provenance lists no contributors.
    pub fn from_model(mut model: LogLinearModel, decomposition: CliqueDecomposition) -> Result<Self> {
        normalize(&mut model, &decomposition)?;
        let provenance = model
            .terms()
            .keys()
            .map(|t| TermProvenance {
                term: t.clone(),
                cliques: Vec::new(),
                separators: Vec::new(),
                separator_only: inside_separator(t, &decomposition),
            })
            .collect();
        Ok(Self {
            model,
            decomposition,
            provenance,
            threshold: None,
        })
    }

    pub fn is_separator_only(&self, term: &Term) -> bool {
        self.provenance
            .iter()
            .find(|p| &p.term == term)
            .map_or_else(|| inside_separator(term, &self.decomposition), |p| p.separator_only)
    }
}

/// Threshold chosen by the separator rule: raising `t` through the sorted
/// norms of the nonzero non-intercept blocks, the largest `t` up to which the
/// zeroed separator terms stay at least as many as the others. 0 when the
/// smallest block is already a non-separator term, infinity when every block
/// goes.
pub fn separator_rule_threshold(model: &CombinedModel) -> f64 {
    let mut norms: Vec<(f64, bool)> = model
        .model
        .terms()
        .keys()
        .filter(|t| !t.is_intercept())
        .map(|t| (model.model.block_norm(t), model.is_separator_only(t)))
        .filter(|&(n, _)| n > 0.0)
        .collect();
    norms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = 0.0;
    let (mut sep, mut other) = (0usize, 0usize);
    let mut i = 0;
    while i < norms.len() {
        // blocks with equal norm are zeroed together
        let mut j = i;
        while j < norms.len() && norms[j].0 == norms[i].0 {
            if norms[j].1 {
                sep += 1;
            } else {
                other += 1;
            }
            j += 1;
        }
        if sep < other {
            break;
        }
        best = norms.get(j).map_or(f64::INFINITY, |n| n.0);
        i = j;
    }
    best
}

/// Zeroes every non-intercept block with norm below the separator-rule
/// threshold and renormalizes.
pub fn threshold_separator_rule(model: &CombinedModel) -> Result<CombinedModel> {
    let t = separator_rule_threshold(model);
    apply_threshold(model, t)
}

/// Zeroes every non-intercept block with norm below `t` and renormalizes.
pub fn apply_threshold(model: &CombinedModel, t: f64) -> Result<CombinedModel> {
    let mut out = model.clone();
    let doomed: Vec<Term> = out
        .model
        .terms()
        .keys()
        .filter(|term| !term.is_intercept() && out.model.block_norm(term) < t)
        .cloned()
        .collect();
    for term in &doomed {
        let width = out.model.coefficients(term).map_or(0, |b| b.len());
        out.model.set_block(term, vec![0.0; width])?;
    }
    out.model.set_log_partition(None);
    normalize(&mut out.model, &out.decomposition)?;
    out.threshold = Some(t);
    Ok(out)
}

/// Interaction graph of the nonzero blocks.
pub fn extract_graph(model: &LogLinearModel) -> Graph {
    let mut g = Graph::new(model.schema().len());
    for t in model.active_terms() {
        let v = t.vars();
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                g.add_edge(v[i], v[j]);
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CliqueDecomposition;
    use crate::junction::{decomposable_density, MarginalTable};
    use crate::schema::{cell_of_index, ContingencyTable};
    use crate::select::{fit_mle, group_lasso::fit_group_lasso, GroupLassoOptions};
    use crate::design::GeneratingClass;

    fn t(v: &[usize]) -> Term {
        Term::new(v.to_vec())
    }

    fn saturated(table: &ContingencyTable) -> LogLinearModel {
        let all = Term::new((0..table.schema().len()).collect());
        fit_mle(table, &GeneratingClass::new(vec![all]).unwrap()).unwrap()
    }

    fn tables(full: &ContingencyTable, d: &CliqueDecomposition) -> (Vec<LogLinearModel>, Vec<LogLinearModel>) {
        let c = d.cliques.iter().map(|c| saturated(&full.collapse(c).unwrap())).collect();
        let s = d.separators.iter().map(|s| saturated(&full.collapse(&s.vars).unwrap())).collect();
        (c, s)
    }

    fn probs(model: &LogLinearModel) -> Vec<f64> {
        model.dense_log_probs(1 << 12).unwrap().iter().map(|x| x.exp()).collect()
    }

    #[test]
    fn single_clique_is_the_clique_fit() {
        let schema = VariableSchema::anonymous(vec![2, 3]).unwrap();
        let table = ContingencyTable::from_counts(schema.clone(), vec![4, 7, 1, 3, 9, 2]).unwrap();
        let d = CliqueDecomposition::from_cliques(vec![vec![0, 1]]);
        let fit = fit_group_lasso(&table, 0.01, &GroupLassoOptions::default()).unwrap().model;
        let cm = combine(&schema, &d, &[fit.clone()], &[]).unwrap();
        for (a, b) in probs(&cm.model).iter().zip(probs(&fit)) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(cm.model.log_partition().unwrap().abs() < 1e-12);
    }

    #[test]
    fn chain_reproduces_margin_product() {
        let schema = VariableSchema::binary(3);
        let counts = vec![12u64, 5, 7, 9, 3, 14, 6, 8];
        let n: f64 = counts.iter().sum::<u64>() as f64;
        let full = ContingencyTable::from_counts(schema.clone(), counts.clone()).unwrap();
        let d = CliqueDecomposition::from_cliques(vec![vec![0, 1], vec![1, 2]]);
        let (c, s) = tables(&full, &d);
        let cm = combine(&schema, &d, &c, &s).unwrap();
        let p = probs(&cm.model);
        for i in 0..8 {
            let cell = cell_of_index(&schema, i).unwrap();
            let m = |f: &dyn Fn(&[usize]) -> bool| {
                (0..8).filter(|&j| f(&cell_of_index(&schema, j).unwrap())).map(|j| counts[j]).sum::<u64>() as f64 / n
            };
            let p12 = m(&|x| x[0] == cell[0] && x[1] == cell[1]);
            let p23 = m(&|x| x[1] == cell[1] && x[2] == cell[2]);
            let p2 = m(&|x| x[1] == cell[1]);
            assert!((p[i] - p12 * p23 / p2).abs() < 1e-12);
        }
    }

    #[test]
    fn star_matches_decomposable_density() {
        let schema = VariableSchema::binary(4);
        let counts: Vec<u64> = (0..16).map(|i| (i * 7 % 5 + 2) as u64).collect();
        let full = ContingencyTable::from_counts(schema.clone(), counts).unwrap();
        let d = CliqueDecomposition::from_cliques(vec![vec![0, 1], vec![1, 2], vec![1, 3]]);
        assert_eq!(d.separators.len(), 1);
        assert_eq!(d.separators[0].index, 2);
        let (c, s) = tables(&full, &d);
        let cm = combine(&schema, &d, &c, &s).unwrap();
        let marg = |vars: &[usize]| {
            let tab = full.collapse(vars).unwrap();
            MarginalTable::new(vars.to_vec(), tab.schema().levels().to_vec(), tab.frequencies()).unwrap()
        };
        let cl: Vec<_> = d.cliques.iter().map(|c| marg(c)).collect();
        let sp: Vec<_> = d.separators.iter().map(|s| marg(&s.vars)).collect();
        for i in 0..16 {
            let cell = cell_of_index(&schema, i).unwrap();
            let direct = decomposable_density(&cell, &cl, &sp, &d).unwrap().ln();
            assert!((cm.model.log_prob(&cell).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_fits_are_rejected() {
        let schema = VariableSchema::binary(3);
        let d = CliqueDecomposition::from_cliques(vec![vec![0, 1], vec![1, 2]]);
        let one = LogLinearModel::constant(VariableSchema::binary(2), -(4f64).ln());
        assert!(combine(&schema, &d, &[one.clone()], &[]).is_err());
        let wrong = LogLinearModel::constant(VariableSchema::binary(2), 0.0);
        assert!(combine(&schema, &d, &[one.clone(), one], &[wrong]).is_err());
    }

    fn hand_model(blocks: &[(&[usize], f64)]) -> CombinedModel {
        let schema = VariableSchema::binary(4);
        let mut terms = BTreeMap::new();
        terms.insert(Term::intercept(), vec![0.0]);
        for (v, x) in blocks {
            terms.insert(t(v), vec![*x]);
        }
        let model = LogLinearModel::new(schema, terms, None).unwrap();
        let d = CliqueDecomposition::from_cliques(vec![vec![0, 1, 2], vec![1, 2, 3]]);
        CombinedModel::from_model(model, d).unwrap()
    }

    #[test]
    fn rule_on_hand_enumerated_norms() {
        // separator {1,2}: blocks {1}, {2} (and a zero {1,2}) are separator terms
        let m = hand_model(&[(&[0], 0.5), (&[1], 0.01), (&[2], 0.02), (&[3], 0.6), (&[0, 1], 0.015), (&[1, 2], 0.0)]);
        // zeroed sets by increasing t: {0.01} 1:0, +0.015 1:1, +0.02 2:1, +0.5 2:2, +0.6 2:3
        assert_eq!(separator_rule_threshold(&m), 0.6);
        let th = threshold_separator_rule(&m).unwrap();
        assert_eq!(th.threshold, Some(0.6));
        let left: Vec<&Term> = th.model.active_terms().collect();
        assert_eq!(left, vec![&t(&[3])]);
        assert_eq!(th.model.intercept(), m.model.intercept());
        let dense = th.model.dense_log_probs(16).unwrap();
        let cell = cell_of_index(th.model.schema(), 5).unwrap();
        assert!((th.model.log_prob(&cell).unwrap() - dense[5]).abs() < 1e-12);
    }

    #[test]
    fn rule_is_identity_without_separator_blocks() {
        let m = hand_model(&[(&[0], 0.5), (&[3], 0.6), (&[0, 1], 0.015), (&[1], 0.0), (&[2], 0.0)]);
        assert_eq!(separator_rule_threshold(&m), 0.0);
        let th = threshold_separator_rule(&m).unwrap();
        assert_eq!(th.model.terms(), m.model.terms());
    }

    #[test]
    fn rule_stops_at_first_imbalance() {
        // {0,1} (other) is smallest, so later separator blocks cannot pull t up
        let m = hand_model(&[(&[0, 1], 0.01), (&[1], 0.02), (&[2], 0.03), (&[1, 2], 0.04), (&[0], 0.5)]);
        assert_eq!(separator_rule_threshold(&m), 0.0);
        // 1:0, 1:1, 2:1, 2:2, then {3} breaks it; {1,2} would restore 3:3
        let m = hand_model(&[(&[1], 0.01), (&[0, 1], 0.02), (&[2], 0.03), (&[0], 0.5), (&[3], 0.6), (&[1, 2], 0.7)]);
        assert_eq!(separator_rule_threshold(&m), 0.6);
    }

    #[test]
    fn thresholded_graph_is_a_subgraph() {
        let m = hand_model(&[(&[0], 0.5), (&[1], 0.01), (&[2], 0.4), (&[3], 0.6), (&[0, 1], 0.015), (&[1, 2], 0.03)]);
        let before = extract_graph(&m.model);
        let after = extract_graph(&threshold_separator_rule(&m).unwrap().model);
        assert!(after.edges().iter().all(|&(u, v)| before.has_edge(u, v)));
        assert_eq!(before.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn graph_of_simple_models() {
        let schema = VariableSchema::binary(3);
        assert_eq!(extract_graph(&LogLinearModel::constant(schema.clone(), 0.0)).num_edges(), 0);
        let mut terms = BTreeMap::new();
        for v in [&[][..], &[0], &[1], &[2], &[0, 1], &[1, 2]] {
            terms.insert(t(v), vec![0.3]);
        }
        let g = extract_graph(&LogLinearModel::new(schema, terms, None).unwrap());
        assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
    }
}
