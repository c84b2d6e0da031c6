//! Exact inference on a junction tree: decomposable densities, the
//! log-partition function, marginal queries and forward sampling.
//!
//! All arithmetic is in log space. Clique tables are the only dense objects,
//! so the cost is exponential in the largest clique, not in the schema.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capacity::{self, DEFAULT_MAX_CELLS};
use crate::design::{Basis, LogLinearModel, Term};
use crate::error::{Error, Result};
use crate::graph::CliqueDecomposition;
use crate::numeric::log_sum_exp;
use crate::schema::{for_each_cell, Dataset, VariableSchema};

/// Probability table over a few variables of a larger schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTable {
    pub vars: Vec<usize>,
    pub levels: Vec<usize>,
    pub probs: Vec<f64>,
}

impl MarginalTable {
    pub fn new(vars: Vec<usize>, levels: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let m: usize = levels.iter().product();
        if vars.len() != levels.len() || probs.len() != m {
            return Err(Error::validation("marginal table shape mismatch"));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::validation("marginal table has negative entries"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(Error::validation(format!("marginal table sums to {total}")));
        }
        Ok(Self { vars, levels, probs })
    }

    /// Entry for a cell given in full-schema coordinates.
    pub fn at(&self, cell: &[usize]) -> f64 {
        let mut j = 0;
        for (&v, &k) in self.vars.iter().zip(&self.levels) {
            j = j * k + cell[v];
        }
        self.probs[j]
    }
}

/// `p(i) = prod_C p(i_C) / prod_S p(i_S)^nu(S)`, evaluated in log space.
///
/// `clique_marginals[c]` belongs to `decomp.cliques[c]` and
/// `separator_marginals[s]` to `decomp.separators[s]`.
pub fn decomposable_density(
    cell: &[usize],
    clique_marginals: &[MarginalTable],
    separator_marginals: &[MarginalTable],
    decomp: &CliqueDecomposition,
) -> Result<f64> {
    if clique_marginals.len() != decomp.cliques.len() || separator_marginals.len() != decomp.separators.len() {
        return Err(Error::validation("marginals do not match the decomposition"));
    }
    let mut log_p = 0.0;
    for t in clique_marginals {
        let p = t.at(cell);
        if p == 0.0 {
            return Ok(0.0);
        }
        log_p += p.ln();
    }
    for (t, s) in separator_marginals.iter().zip(&decomp.separators) {
        if s.vars.is_empty() {
            continue;
        }
        let p = t.at(cell);
        if p == 0.0 {
            return Err(Error::Singularity {
                separator: s.vars.clone(),
            });
        }
        log_p -= s.index as f64 * p.ln();
    }
    Ok(log_p.exp())
}

/// Maps clique-local cell indices onto separator-local indices.
fn projection(clique: &[usize], levels: &[usize], sep: &[usize]) -> Vec<usize> {
    let local: Vec<usize> = sep
        .iter()
        .map(|v| clique.binary_search(v).expect("separator inside clique"))
        .collect();
    let clique_levels: Vec<usize> = clique.iter().map(|&v| levels[v]).collect();
    let mut out = Vec::with_capacity(clique_levels.iter().product());
    for_each_cell(&clique_levels, |_, cell| {
        let mut j = 0;
        for &l in &local {
            j = j * clique_levels[l] + cell[l];
        }
        out.push(j);
    });
    out
}

#[derive(Debug, Clone)]
struct EdgeInfo {
    child: usize,
    parent: usize,
    separator: Vec<usize>,
    child_proj: Vec<usize>,
    parent_proj: Vec<usize>,
    /// log p(x_S), normalized
    belief: Vec<f64>,
}

/// A calibrated junction tree for a normalized log-linear model.
#[derive(Debug, Clone)]
pub struct JunctionTree {
    schema: VariableSchema,
    decomp: CliqueDecomposition,
    /// log p(x_C) per clique
    beliefs: Vec<Vec<f64>>,
    /// sum-product message passing order: roots first, parents before children
    order: Vec<usize>,
    /// edge to parent for each non-root clique, indexes `edges`
    parent_edge: Vec<Option<usize>>,
    edges: Vec<EdgeInfo>,
    log_partition: f64,
}

impl JunctionTree {
    pub fn calibrate(model: &LogLinearModel, decomp: &CliqueDecomposition) -> Result<Self> {
        Self::calibrate_with_limit(model, decomp, DEFAULT_MAX_CELLS)
    }

    pub fn calibrate_with_limit(
        model: &LogLinearModel,
        decomp: &CliqueDecomposition,
        max_cells: usize,
    ) -> Result<Self> {
        let schema = model.schema().clone();
        let levels = schema.levels();
        let p = schema.len();
        let covered = decomp.vertices();
        if covered.len() != p || covered.iter().enumerate().any(|(i, &v)| i != v) {
            return Err(Error::validation(
                "decomposition must cover every variable of the schema exactly",
            ));
        }
        let k = decomp.cliques.len();

        // potentials from assigned terms
        let mut assigned: Vec<Vec<(&Term, &Vec<f64>)>> = vec![Vec::new(); k];
        for (t, beta) in model.terms() {
            if t.is_intercept() {
                continue;
            }
            let c = decomp
                .covering_clique(t.vars())
                .ok_or_else(|| Error::Coverage { term: t.vars().to_vec() })?;
            assigned[c].push((t, beta));
        }
        let mut potentials = Vec::with_capacity(k);
        for (c, clique) in decomp.cliques.iter().enumerate() {
            let clique_levels: Vec<usize> = clique.iter().map(|&v| levels[v]).collect();
            let basis = Basis::new(&clique_levels, max_cells)?;
            let mut coef = vec![0.0; basis.num_cells()];
            for (t, beta) in &assigned[c] {
                let local = Term::new(
                    t.vars()
                        .iter()
                        .map(|v| clique.binary_search(v).expect("term inside clique"))
                        .collect(),
                );
                for (j, b) in basis.block_positions(&local).into_iter().zip(beta.iter()) {
                    coef[j] = *b;
                }
            }
            potentials.push(basis.synthesize(&coef));
        }

        // traversal order over the forest
        let mut nbrs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); k];
        for (e, te) in decomp.tree_edges.iter().enumerate() {
            nbrs[te.a].push((te.b, e));
            nbrs[te.b].push((te.a, e));
        }
        let mut order = Vec::with_capacity(k);
        let mut parent_edge = vec![None; k];
        let mut seen = vec![false; k];
        let mut edges = Vec::new();
        for root in 0..k {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            let start = order.len();
            order.push(root);
            let mut i = start;
            while i < order.len() {
                let c = order[i];
                i += 1;
                for &(d, e) in &nbrs[c] {
                    if !seen[d] {
                        seen[d] = true;
                        let sep = decomp.tree_edges[e].separator.clone();
                        parent_edge[d] = Some(edges.len());
                        edges.push(EdgeInfo {
                            child: d,
                            parent: c,
                            child_proj: projection(&decomp.cliques[d], levels, &sep),
                            parent_proj: projection(&decomp.cliques[c], levels, &sep),
                            belief: Vec::new(),
                            separator: sep,
                        });
                        order.push(d);
                    }
                }
            }
        }

        // upward pass
        let mut upward = potentials;
        let mut messages: Vec<Vec<f64>> = vec![Vec::new(); edges.len()];
        for &c in order.iter().rev() {
            if let Some(e) = parent_edge[c] {
                let info = &edges[e];
                let sep_cells: usize = info.separator.iter().map(|&v| levels[v]).product();
                let msg = marginalize(&upward[c], &info.child_proj, sep_cells);
                let parent = info.parent;
                for (x, &s) in upward[parent].iter_mut().zip(&info.parent_proj) {
                    *x += msg[s];
                }
                messages[e] = msg;
            }
        }

        // downward pass
        let mut log_partition = model.intercept();
        let mut beliefs: Vec<Vec<f64>> = vec![Vec::new(); k];
        for &c in &order {
            match parent_edge[c] {
                None => {
                    let z = log_sum_exp(&upward[c]);
                    log_partition += z;
                    beliefs[c] = upward[c].iter().map(|x| x - z).collect();
                }
                Some(e) => {
                    let info = &edges[e];
                    let sep_cells: usize = info.separator.iter().map(|&v| levels[v]).product();
                    let sep_belief = marginalize(&beliefs[info.parent], &info.parent_proj, sep_cells);
                    let b: Vec<f64> = upward[c]
                        .iter()
                        .zip(&info.child_proj)
                        .map(|(x, &s)| x + sep_belief[s] - messages[e][s])
                        .collect();
                    beliefs[c] = b;
                    edges[e].belief = sep_belief;
                }
            }
        }

        Ok(Self {
            schema,
            decomp: decomp.clone(),
            beliefs,
            order,
            parent_edge,
            edges,
            log_partition,
        })
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn decomposition(&self) -> &CliqueDecomposition {
        &self.decomp
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    /// Marginal probabilities of clique `c`.
    pub fn clique_marginal(&self, c: usize) -> MarginalTable {
        let vars = self.decomp.cliques[c].clone();
        let levels = vars.iter().map(|&v| self.schema.levels()[v]).collect();
        MarginalTable {
            vars,
            levels,
            probs: self.beliefs[c].iter().map(|x| x.exp()).collect(),
        }
    }

    /// Normalized log-probability of a full cell.
    pub fn log_prob(&self, cell: &[usize]) -> f64 {
        let levels = self.schema.levels();
        let mut lp = 0.0;
        for (c, clique) in self.decomp.cliques.iter().enumerate() {
            lp += self.beliefs[c][local_index(clique, levels, cell)];
        }
        for e in &self.edges {
            if !e.separator.is_empty() {
                lp -= e.belief[local_index(&e.separator, levels, cell)];
            }
        }
        lp
    }

    /// Same as [`log_prob`](Self::log_prob) for a stored observation row.
    pub fn log_prob_codes(&self, row: &[u16]) -> f64 {
        let levels = self.schema.levels();
        let mut lp = 0.0;
        for (c, clique) in self.decomp.cliques.iter().enumerate() {
            lp += self.beliefs[c][local_index_codes(clique, levels, row)];
        }
        for e in &self.edges {
            if !e.separator.is_empty() {
                lp -= e.belief[local_index_codes(&e.separator, levels, row)];
            }
        }
        lp
    }

    /// Marginal table over `vars` (sorted). Margins inside one clique are read
    /// off its belief; otherwise the smallest subtree covering `vars` is
    /// enumerated, which fails with a capacity error when its joint table
    /// would exceed `max_cells`.
    pub fn marginal_table(&self, vars: &[usize], max_cells: usize) -> Result<MarginalTable> {
        crate::schema::check_subset(vars, self.schema.len())?;
        let levels = self.schema.levels();
        let out_levels: Vec<usize> = vars.iter().map(|&v| levels[v]).collect();
        if vars.is_empty() {
            return Ok(MarginalTable {
                vars: Vec::new(),
                levels: Vec::new(),
                probs: vec![1.0],
            });
        }
        if let Some(c) = self.decomp.covering_clique(vars) {
            let clique = &self.decomp.cliques[c];
            let proj = projection(clique, levels, vars);
            let m: usize = out_levels.iter().product();
            let mut probs = vec![0.0; m];
            for (x, &s) in self.beliefs[c].iter().zip(&proj) {
                probs[s] += x.exp();
            }
            return Ok(MarginalTable {
                vars: vars.to_vec(),
                levels: out_levels,
                probs,
            });
        }

        // Steiner subtree: prune leaves that hold no queried variable.
        let k = self.decomp.cliques.len();
        let mut alive = vec![true; k];
        let holds = |c: usize| self.decomp.cliques[c].iter().any(|v| vars.binary_search(v).is_ok());
        let mut edge_alive = vec![true; self.edges.len()];
        loop {
            let mut changed = false;
            for c in 0..k {
                if !alive[c] || holds(c) {
                    continue;
                }
                let live_edges: Vec<usize> = (0..self.edges.len())
                    .filter(|&e| edge_alive[e] && (self.edges[e].child == c || self.edges[e].parent == c))
                    .collect();
                if live_edges.len() <= 1 {
                    alive[c] = false;
                    for e in live_edges {
                        edge_alive[e] = false;
                    }
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut union: Vec<usize> = (0..k)
            .filter(|&c| alive[c])
            .flat_map(|c| self.decomp.cliques[c].iter().copied())
            .collect();
        union.sort_unstable();
        union.dedup();
        let union_levels: Vec<usize> = union.iter().map(|&v| levels[v]).collect();
        let cost: u128 = union_levels.iter().map(|&k| k as u128).product();
        if cost > max_cells as u128 {
            return Err(Error::Capacity {
                what: format!("marginal over {vars:?} spans cliques on {} variables", union.len()),
                cells: cost,
                limit: max_cells as u128,
            });
        }
        capacity::note_dense(cost as usize);
        let m: usize = out_levels.iter().product();
        let mut acc = vec![Vec::new(); m];
        let mut full = vec![0usize; self.schema.len()];
        let out_pos: Vec<usize> = vars.iter().map(|v| union.binary_search(v).unwrap()).collect();
        for_each_cell(&union_levels, |_, cell| {
            for (&v, &x) in union.iter().zip(cell) {
                full[v] = x;
            }
            let mut lp = 0.0;
            for c in (0..k).filter(|&c| alive[c]) {
                lp += self.beliefs[c][local_index(&self.decomp.cliques[c], levels, &full)];
            }
            for (e, info) in self.edges.iter().enumerate() {
                if edge_alive[e] && !info.separator.is_empty() {
                    lp -= info.belief[local_index(&info.separator, levels, &full)];
                }
            }
            let mut j = 0;
            for &i in &out_pos {
                j = j * union_levels[i] + cell[i];
            }
            acc[j].push(lp);
        });
        Ok(MarginalTable {
            vars: vars.to_vec(),
            levels: out_levels,
            probs: acc.iter().map(|v| log_sum_exp(v).exp()).collect(),
        })
    }

    /// Probabilities of cells given on the margin `vars`. Full cells (all
    /// variables) are evaluated directly from the clique factorization.
    pub fn marginal_query(&self, vars: &[usize], cells: &[Vec<usize>], max_cells: usize) -> Result<Vec<f64>> {
        let levels = self.schema.levels();
        for cell in cells {
            if cell.len() != vars.len() || cell.iter().zip(vars).any(|(&x, &v)| x >= levels[v]) {
                return Err(Error::validation(format!("query cell {cell:?} invalid for margin {vars:?}")));
            }
        }
        if vars.len() == self.schema.len() && vars.iter().enumerate().all(|(i, &v)| i == v) {
            return Ok(cells.iter().map(|c| self.log_prob(c).exp()).collect());
        }
        let table = self.marginal_table(vars, max_cells)?;
        Ok(cells
            .iter()
            .map(|c| {
                let mut j = 0;
                for (&x, &k) in c.iter().zip(&table.levels) {
                    j = j * k + x;
                }
                table.probs[j]
            })
            .collect())
    }

    /// Forward sampling: roots from their marginal, children conditionally on
    /// their separator.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> Dataset {
        let levels = self.schema.levels();
        let p = self.schema.len();
        // per clique: for each separator cell, cumulative probabilities over
        // the clique cells that project onto it
        struct Sampler {
            cdf: Vec<Vec<f64>>,
            cells: Vec<Vec<usize>>,
        }
        let samplers: Vec<Sampler> = (0..self.decomp.cliques.len())
            .map(|c| {
                let (proj, sep_cells): (Vec<usize>, usize) = match self.parent_edge[c] {
                    Some(e) => {
                        let info = &self.edges[e];
                        (
                            info.child_proj.clone(),
                            info.separator.iter().map(|&v| levels[v]).product(),
                        )
                    }
                    None => (vec![0; self.beliefs[c].len()], 1),
                };
                let mut cdf = vec![Vec::new(); sep_cells];
                let mut cells = vec![Vec::new(); sep_cells];
                let mut norm = vec![f64::NEG_INFINITY; sep_cells];
                for (x, &s) in self.beliefs[c].iter().zip(&proj) {
                    norm[s] = log_sum_exp(&[norm[s], *x]);
                }
                for (i, (x, &s)) in self.beliefs[c].iter().zip(&proj).enumerate() {
                    let prev = cdf[s].last().copied().unwrap_or(0.0);
                    cdf[s].push(prev + (x - norm[s]).exp());
                    cells[s].push(i);
                }
                Sampler { cdf, cells }
            })
            .collect();
        let clique_levels: Vec<Vec<usize>> = self
            .decomp
            .cliques
            .iter()
            .map(|c| c.iter().map(|&v| levels[v]).collect())
            .collect();
        let mut data = vec![0u16; n * p];
        let mut row = vec![0usize; p];
        for r in 0..n {
            for &c in &self.order {
                let s = match self.parent_edge[c] {
                    Some(e) => local_index(&self.edges[e].separator, levels, &row),
                    None => 0,
                };
                let sampler = &samplers[c];
                let cdf = &sampler.cdf[s];
                let u: f64 = rng.random::<f64>() * cdf.last().copied().unwrap_or(1.0);
                let pick = cdf.partition_point(|&x| x <= u).min(cdf.len() - 1);
                let mut idx = sampler.cells[s][pick];
                let clique = &self.decomp.cliques[c];
                for (i, &v) in clique.iter().enumerate().rev() {
                    let k = clique_levels[c][i];
                    row[v] = idx % k;
                    idx /= k;
                }
            }
            for v in 0..p {
                data[r * p + v] = row[v] as u16;
            }
        }
        Dataset::from_codes_unchecked(self.schema.clone(), data)
    }
}

fn marginalize(table: &[f64], proj: &[usize], cells: usize) -> Vec<f64> {
    let mut max = vec![f64::NEG_INFINITY; cells];
    for (x, &s) in table.iter().zip(proj) {
        if *x > max[s] {
            max[s] = *x;
        }
    }
    let mut sum = vec![0.0; cells];
    for (x, &s) in table.iter().zip(proj) {
        if max[s] > f64::NEG_INFINITY {
            sum[s] += (x - max[s]).exp();
        }
    }
    max.iter()
        .zip(&sum)
        .map(|(m, s)| if *m == f64::NEG_INFINITY { *m } else { m + s.ln() })
        .collect()
}

#[inline]
fn local_index(vars: &[usize], levels: &[usize], cell: &[usize]) -> usize {
    let mut j = 0;
    for &v in vars {
        j = j * levels[v] + cell[v];
    }
    j
}

#[inline]
fn local_index_codes(vars: &[usize], levels: &[usize], row: &[u16]) -> usize {
    let mut j = 0;
    for &v in vars {
        j = j * levels[v] + row[v] as usize;
    }
    j
}

/// Exact log-partition of `model` by sum-product over the junction tree.
pub fn junction_normalize(model: &LogLinearModel, decomp: &CliqueDecomposition) -> Result<f64> {
    Ok(JunctionTree::calibrate(model, decomp)?.log_partition())
}

/// Sets the model's log-partition from the junction tree and returns the tree.
pub fn normalize(model: &mut LogLinearModel, decomp: &CliqueDecomposition) -> Result<JunctionTree> {
    let jt = JunctionTree::calibrate(model, decomp)?;
    model.set_log_partition(Some(jt.log_partition()));
    Ok(jt)
}

/// Probabilities of `cells` on margin `vars` under a normalized model.
pub fn marginal_query(
    model: &LogLinearModel,
    decomp: &CliqueDecomposition,
    vars: &[usize],
    cells: &[Vec<usize>],
) -> Result<Vec<f64>> {
    if model.log_partition().is_none() {
        return Err(Error::validation("model is not normalized"));
    }
    JunctionTree::calibrate(model, decomp)?.marginal_query(vars, cells, DEFAULT_MAX_CELLS)
}

/// `n` observations drawn from `model`, deterministic given `seed`.
pub fn sample_from_model(
    model: &LogLinearModel,
    decomp: &CliqueDecomposition,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    Ok(JunctionTree::calibrate(model, decomp)?.sample(n, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::hierarchical_closure;
    use crate::graph::{cliques_and_separators, Graph};
    use crate::schema::tabulate;
    use rand::Rng;
    use std::collections::BTreeMap;

    /// Brute-force log-probabilities by enumerating all cells.
    fn brute_log_probs(model: &LogLinearModel) -> Vec<f64> {
        let mut eta = Vec::new();
        for_each_cell(model.schema().levels(), |_, cell| eta.push(model.eta(cell)));
        let z = log_sum_exp(&eta);
        eta.into_iter().map(|e| e - z).collect()
    }

    fn brute_log_z(model: &LogLinearModel) -> f64 {
        let mut eta = Vec::new();
        for_each_cell(model.schema().levels(), |_, cell| eta.push(model.eta(cell)));
        log_sum_exp(&eta)
    }

    /// Random model whose terms are all subsets of the graph's cliques.
    fn random_model(g: &Graph, levels: Vec<usize>, seed: u64) -> (LogLinearModel, CliqueDecomposition) {
        let d = cliques_and_separators(g).unwrap();
        let gens: Vec<Term> = d.cliques.iter().map(|c| Term::new(c.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = VariableSchema::anonymous(levels.clone()).unwrap();
        let terms: BTreeMap<Term, Vec<f64>> = hierarchical_closure(&gens)
            .into_iter()
            .map(|t| {
                let w = t.width(&levels);
                let beta = (0..w).map(|_| rng.random::<f64>() - 0.5).collect();
                (t, beta)
            })
            .collect();
        (LogLinearModel::new(schema, terms, None).unwrap(), d)
    }

    #[test]
    fn intercept_only_log_partition() {
        let schema = VariableSchema::anonymous(vec![2, 3, 4]).unwrap();
        let model = LogLinearModel::constant(schema, 0.7);
        let d = CliqueDecomposition::from_cliques(vec![vec![0], vec![1], vec![2]]);
        let z = junction_normalize(&model, &d).unwrap();
        assert!((z - (0.7 + 24f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn single_clique_matches_direct_sum() {
        let g = Graph::complete(3);
        let (model, d) = random_model(&g, vec![2, 3, 2], 5);
        assert_eq!(d.cliques.len(), 1);
        let z = junction_normalize(&model, &d).unwrap();
        assert!((z - brute_log_z(&model)).abs() < 1e-12);
    }

    #[test]
    fn ten_binary_variables_match_brute_force() {
        let g = Graph::from_edges(
            10,
            &[(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (4, 5), (3, 5), (6, 7), (7, 8), (8, 9), (1, 6)],
        );
        for seed in 0..5 {
            let (model, d) = random_model(&g, vec![2; 10], seed);
            let z = junction_normalize(&model, &d).unwrap();
            assert!((z - brute_log_z(&model)).abs() < 1e-10);
        }
    }

    #[test]
    fn coverage_error() {
        let schema = VariableSchema::binary(3);
        let mut terms = BTreeMap::new();
        terms.insert(Term::intercept(), vec![0.0]);
        terms.insert(Term::new(vec![0]), vec![0.1]);
        terms.insert(Term::new(vec![2]), vec![0.1]);
        terms.insert(Term::new(vec![0, 2]), vec![0.1]);
        let model = LogLinearModel::new(schema, terms, None).unwrap();
        let d = CliqueDecomposition::from_cliques(vec![vec![0, 1], vec![1, 2]]);
        assert!(matches!(junction_normalize(&model, &d), Err(Error::Coverage { .. })));
    }

    #[test]
    fn log_prob_and_marginals_match_brute_force() {
        let g = Graph::from_edges(5, &[(0, 1), (1, 2), (0, 2), (2, 3), (3, 4)]);
        let (mut model, d) = random_model(&g, vec![2, 3, 2, 2, 3], 9);
        let jt = normalize(&mut model, &d).unwrap();
        let brute = brute_log_probs(&model);
        let levels = model.schema().levels().to_vec();
        for_each_cell(&levels, |i, cell| {
            assert!((jt.log_prob(cell) - brute[i]).abs() < 1e-10);
            assert!((model.log_prob(cell).unwrap() - brute[i]).abs() < 1e-10);
        });
        // a margin spanning three cliques, and one inside a clique
        for vars in [vec![0, 4], vec![1, 2], vec![0, 3, 4]] {
            let t = jt.marginal_table(&vars, 1 << 20).unwrap();
            let mut expect = vec![0.0; t.probs.len()];
            for_each_cell(&levels, |i, cell| {
                let mut j = 0;
                for &v in &vars {
                    j = j * levels[v] + cell[v];
                }
                expect[j] += brute[i].exp();
            });
            for (a, b) in t.probs.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(matches!(jt.marginal_table(&[0, 4], 4), Err(Error::Capacity { .. })));
        assert_eq!(jt.marginal_query(&[], &[vec![]], 1).unwrap(), vec![1.0]);
        let all: Vec<Vec<usize>> = {
            let mut v = Vec::new();
            for_each_cell(&[2, 3, 2], |_, c| v.push(c.to_vec()));
            v
        };
        let total: f64 = jt.marginal_query(&[0, 1, 2], &all, 1 << 10).unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn independence_pairwise_margin_is_product() {
        let g = Graph::new(3);
        let (mut model, d) = random_model(&g, vec![2, 3, 2], 3);
        let jt = normalize(&mut model, &d).unwrap();
        let pair = jt.marginal_table(&[0, 1], 1 << 10).unwrap();
        let a = jt.marginal_table(&[0], 16).unwrap();
        let b = jt.marginal_table(&[1], 16).unwrap();
        for x in 0..2 {
            for y in 0..3 {
                assert!((pair.probs[x * 3 + y] - a.probs[x] * b.probs[y]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decomposable_density_examples() {
        // single clique: the joint itself
        let g = Graph::complete(2);
        let (mut model, d) = random_model(&g, vec![2, 2], 1);
        let jt = normalize(&mut model, &d).unwrap();
        let joint = jt.clique_marginal(0);
        assert!((decomposable_density(&[1, 0], &[joint.clone()], &[], &d).unwrap() - joint.probs[2]).abs() < 1e-15);

        // random decomposable model on 4 binary variables, brute force at all 16 cells
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (1, 3), (2, 3)]);
        for seed in 0..10 {
            let (model, d) = random_model(&g, vec![2; 4], seed);
            let brute = brute_log_probs(&model);
            let levels = vec![2; 4];
            let marg = |vars: &[usize]| {
                let mut probs = vec![0.0; 1 << vars.len()];
                for_each_cell(&levels, |i, cell| {
                    let mut j = 0;
                    for &v in vars {
                        j = j * 2 + cell[v];
                    }
                    probs[j] += brute[i].exp();
                });
                MarginalTable::new(vars.to_vec(), vec![2; vars.len()], probs).unwrap()
            };
            let cm: Vec<_> = d.cliques.iter().map(|c| marg(c)).collect();
            let sm: Vec<_> = d.separators.iter().map(|s| marg(&s.vars)).collect();
            for_each_cell(&levels, |i, cell| {
                let p = decomposable_density(cell, &cm, &sm, &d).unwrap();
                assert!((p - brute[i].exp()).abs() < 1e-12);
            });
        }
    }

    #[test]
    fn singular_separator_reported() {
        let d = CliqueDecomposition::from_cliques(vec![vec![0, 1], vec![1, 2]]);
        let c1 = MarginalTable::new(vec![0, 1], vec![2, 2], vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        let c2 = MarginalTable::new(vec![1, 2], vec![2, 2], vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        let s = MarginalTable::new(vec![1], vec![2], vec![1.0, 0.0]).unwrap();
        let err = decomposable_density(&[0, 1, 0], &[c1, c2], &[s], &d);
        assert!(matches!(err, Err(Error::Singularity { .. })));
    }

    #[test]
    fn sampling_is_deterministic_and_empty_for_zero() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]);
        let (model, d) = random_model(&g, vec![2, 2, 2], 4);
        assert_eq!(sample_from_model(&model, &d, 0, 1).unwrap().n(), 0);
        let a = sample_from_model(&model, &d, 500, 42).unwrap();
        let b = sample_from_model(&model, &d, 500, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn independence_sample_passes_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let g = Graph::new(3);
        let (mut model, d) = random_model(&g, vec![2, 2, 2], 8);
        let jt = normalize(&mut model, &d).unwrap();
        let data = jt.sample(100_000, 77);
        let crit = ChiSquared::new(3.0).unwrap().inverse_cdf(0.999);
        for pair in [[0, 1], [0, 2], [1, 2]] {
            let t = tabulate(&data, &pair).unwrap();
            let a = jt.marginal_table(&[pair[0]], 4).unwrap();
            let b = jt.marginal_table(&[pair[1]], 4).unwrap();
            let n = data.n() as f64;
            let mut stat = 0.0;
            for x in 0..2 {
                for y in 0..2 {
                    let e = n * a.probs[x] * b.probs[y];
                    stat += (t.counts()[x * 2 + y] as f64 - e).powi(2) / e;
                }
            }
            assert!(stat < crit, "pair {pair:?}: {stat}");
        }
    }

    #[test]
    fn chain_sample_matches_clique_marginals() {
        let g = Graph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let (mut model, d) = random_model(&g, vec![2, 3, 2, 2, 2], 21);
        let jt = normalize(&mut model, &d).unwrap();
        let data = jt.sample(100_000, 5);
        let n = data.n() as f64;
        for (c, clique) in d.cliques.iter().enumerate() {
            let t = tabulate(&data, clique).unwrap();
            let m = jt.clique_marginal(c);
            for (&obs, &p) in t.counts().iter().zip(&m.probs) {
                let sd = (n * p * (1.0 - p)).sqrt();
                assert!((obs as f64 - n * p).abs() <= 3.0 * sd.max(1.0), "clique {clique:?}");
            }
        }
    }
}
