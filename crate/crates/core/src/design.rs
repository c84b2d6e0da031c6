//! Orthogonal log-linear design, interaction terms and generating classes.
//!
//! Every variable with `k` levels gets `k - 1` orthogonal polynomial contrast
//! columns scaled so that `sum_l c(l)^2 = k`, with the entry at level 0 made
//! positive. The block of a term is the row-wise Kronecker product of its
//! variables' contrasts, so a block evaluated at a cell depends only on the
//! cell's coordinates on the term, never on the surrounding schema. The full
//! design over `m` cells is square, and `X / sqrt(m)` is an orthogonal matrix.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::capacity;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::schema::{check_subset, VariableSchema};

/// Interaction between the variables of a subset; the empty set is the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Term(Vec<usize>);

impl Term {
    pub fn new(mut vars: Vec<usize>) -> Self {
        vars.sort_unstable();
        vars.dedup();
        Term(vars)
    }

    pub fn intercept() -> Self {
        Term(Vec::new())
    }

    pub fn vars(&self) -> &[usize] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn is_intercept(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_subset_of(&self, set: &[usize]) -> bool {
        self.0.iter().all(|v| set.contains(v))
    }

    pub fn contains_var(&self, v: usize) -> bool {
        self.0.binary_search(&v).is_ok()
    }

    /// Number of design columns: product of `k_v - 1` over the term's variables.
    pub fn width(&self, levels: &[usize]) -> usize {
        self.0.iter().map(|&v| levels[v] - 1).product()
    }

    /// All subsets, including the empty set and the term itself.
    pub fn subsets(&self) -> Vec<Term> {
        let d = self.0.len();
        (0u64..1 << d)
            .map(|mask| Term((0..d).filter(|i| mask >> i & 1 == 1).map(|i| self.0[i]).collect()))
            .collect()
    }

    /// Re-indexes variables through `map` (local position -> global index).
    pub fn mapped(&self, map: &[usize]) -> Term {
        Term::new(self.0.iter().map(|&v| map[v]).collect())
    }
}

impl Ord for Term {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.len().cmp(&other.0.len()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Term {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "()");
        }
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Orthogonal polynomial contrasts for `k` levels: `k` rows, `k - 1` columns.
pub fn contrasts(k: usize) -> Vec<Vec<f64>> {
    assert!(k >= 2, "need at least two levels");
    if k == 2 {
        return vec![vec![1.0], vec![-1.0]];
    }
    let center = (k as f64 - 1.0) / 2.0;
    let x: Vec<f64> = (0..k).map(|l| l as f64 - center).collect();
    // Gram-Schmidt on 1, x, x^2, ... (modified, twice for stability)
    let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / (k as f64).sqrt(); k]];
    for d in 1..k {
        let mut col: Vec<f64> = x.iter().map(|&xi| xi.powi(d as i32)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = col.iter().zip(b).map(|(a, b)| a * b).sum();
                for (c, bi) in col.iter_mut().zip(b) {
                    *c -= dot * bi;
                }
            }
        }
        let norm = col.iter().map(|c| c * c).sum::<f64>().sqrt();
        let sign = if col[0] < 0.0 { -1.0 } else { 1.0 };
        for c in &mut col {
            *c *= sign / norm;
        }
        basis.push(col);
    }
    let scale = (k as f64).sqrt();
    (0..k)
        .map(|l| basis[1..].iter().map(|b| b[l] * scale).collect())
        .collect()
}

/// `k x k` matrix whose first column is all ones and whose remaining columns
/// are the contrasts of [`contrasts`].
fn full_variable_basis(k: usize) -> Vec<Vec<f64>> {
    contrasts(k)
        .into_iter()
        .map(|row| std::iter::once(1.0).chain(row).collect())
        .collect()
}

/// Fast tensor-product design over a small schema.
///
/// Coefficients live in "Kronecker order": position `j` decodes in mixed
/// radix (last variable fastest) to one column index `j_v` per variable, and
/// the term of `j` is `{v : j_v > 0}`.
#[derive(Debug, Clone)]
pub struct Basis {
    levels: Vec<usize>,
    mats: Vec<Vec<Vec<f64>>>,
    m: usize,
}

impl Basis {
    pub fn new(levels: &[usize], max_cells: usize) -> Result<Self> {
        let m = capacity::cells_for(levels, max_cells, "design basis")?;
        capacity::note_dense(m);
        Ok(Self {
            levels: levels.to_vec(),
            mats: levels.iter().map(|&k| full_variable_basis(k)).collect(),
            m,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.m
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    fn apply(&self, input: &[f64], transpose: bool) -> Vec<f64> {
        assert_eq!(input.len(), self.m);
        let mut data = input.to_vec();
        let mut buf = Vec::new();
        let mut stride = self.m;
        for (v, &k) in self.levels.iter().enumerate() {
            stride /= k;
            let q = &self.mats[v];
            let block = k * stride;
            buf.resize(k, 0.0);
            for start in (0..self.m).step_by(block) {
                for inner in 0..stride {
                    let base = start + inner;
                    for (a, b) in buf.iter_mut().enumerate() {
                        *b = data[base + a * stride];
                    }
                    for out in 0..k {
                        let mut s = 0.0;
                        for (a, b) in buf.iter().enumerate() {
                            let w = if transpose { q[a][out] } else { q[out][a] };
                            s += w * b;
                        }
                        data[base + out * stride] = s;
                    }
                }
            }
        }
        data
    }

    /// Cell values `X gamma` for Kronecker-ordered coefficients.
    pub fn synthesize(&self, coef: &[f64]) -> Vec<f64> {
        self.apply(coef, false)
    }

    /// `X^T r` in Kronecker order.
    pub fn analyze(&self, r: &[f64]) -> Vec<f64> {
        self.apply(r, true)
    }

    /// Term (local variable positions) of every Kronecker position.
    pub fn position_terms(&self) -> Vec<Term> {
        let mut out = Vec::with_capacity(self.m);
        crate::schema::for_each_cell(&self.levels, |_, j| {
            out.push(Term((0..j.len()).filter(|&v| j[v] > 0).collect()));
        });
        out
    }

    /// Kronecker positions of a term's block, in block order.
    pub fn block_positions(&self, term: &Term) -> Vec<usize> {
        let mut strides = vec![1usize; self.levels.len()];
        for v in (0..self.levels.len().saturating_sub(1)).rev() {
            strides[v] = strides[v + 1] * self.levels[v + 1];
        }
        let mut out = vec![0usize];
        for &v in term.vars() {
            let mut next = Vec::with_capacity(out.len() * (self.levels[v] - 1));
            for &base in &out {
                for j in 1..self.levels[v] {
                    next.push(base + j * strides[v]);
                }
            }
            out = next;
        }
        out
    }
}

/// Memoized [`contrasts`].
pub(crate) fn cached_contrasts(k: usize) -> Arc<Vec<Vec<f64>>> {
    static CACHE: OnceLock<RwLock<HashMap<usize, Arc<Vec<Vec<f64>>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(c) = cache.read().expect("contrast cache poisoned").get(&k) {
        return Arc::clone(c);
    }
    let c = Arc::new(contrasts(k));
    cache
        .write()
        .expect("contrast cache poisoned")
        .entry(k)
        .or_insert(c)
        .clone()
}

/// Values of a term's block at one cell (full-schema coordinates).
pub fn term_row(term: &Term, levels: &[usize], cell: &[usize]) -> Vec<f64> {
    let mut row = vec![1.0];
    for &v in term.vars() {
        let c = cached_contrasts(levels[v]);
        let cv = &c[cell[v]];
        let mut next = Vec::with_capacity(row.len() * cv.len());
        for &r in &row {
            for &x in cv {
                next.push(r * x);
            }
        }
        row = next;
    }
    row
}

/// Terms in design order with the columns housing each block.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBlockMap {
    pub terms: Vec<Term>,
    pub ranges: Vec<Range<usize>>,
}

impl DesignBlockMap {
    pub fn new(levels: &[usize], terms: impl IntoIterator<Item = Term>) -> Self {
        let terms: Vec<Term> = terms.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let mut ranges = Vec::with_capacity(terms.len());
        let mut col = 0;
        for t in &terms {
            let w = t.width(levels);
            ranges.push(col..col + w);
            col += w;
        }
        Self { terms, ranges }
    }

    pub fn num_columns(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn range_of(&self, term: &Term) -> Option<Range<usize>> {
        self.terms
            .binary_search(term)
            .ok()
            .map(|i| self.ranges[i].clone())
    }
}

/// Dense row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DesignMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `X^T X`, row-major.
    pub fn gram(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.cols * self.cols];
        for i in 0..self.rows {
            let r = self.row(i);
            for a in 0..self.cols {
                for b in 0..self.cols {
                    g[a * self.cols + b] += r[a] * r[b];
                }
            }
        }
        g
    }
}

/// Dense design over all cells of `schema` for the given terms.
pub fn build_design(schema: &VariableSchema, terms: &[Term]) -> Result<(DesignMatrix, DesignBlockMap)> {
    if !terms.iter().any(Term::is_intercept) {
        return Err(Error::validation("design terms must include the intercept"));
    }
    for t in terms {
        check_subset(t.vars(), schema.len())?;
    }
    let m = schema.num_cells(capacity::DEFAULT_MAX_CELLS)?;
    let map = DesignBlockMap::new(schema.levels(), terms.iter().cloned());
    let cols = map.num_columns();
    capacity::note_dense(m);
    let mut data = vec![0.0; m * cols];
    crate::schema::for_each_cell(schema.levels(), |i, cell| {
        for (t, range) in map.terms.iter().zip(&map.ranges) {
            let row = term_row(t, schema.levels(), cell);
            data[i * cols + range.start..i * cols + range.end].copy_from_slice(&row);
        }
    });
    Ok((DesignMatrix { rows: m, cols, data }, map))
}

/// Downward closure of a set of terms, always including the intercept.
pub fn hierarchical_closure<'a>(terms: impl IntoIterator<Item = &'a Term>) -> BTreeSet<Term> {
    let mut out = BTreeSet::new();
    out.insert(Term::intercept());
    for t in terms {
        if out.contains(t) {
            continue;
        }
        out.extend(t.subsets());
    }
    out
}

/// Maximal interactions of a hierarchical model; no generator contains another.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratingClass {
    generators: Vec<Term>,
}

impl GeneratingClass {
    pub fn new(generators: Vec<Term>) -> Result<Self> {
        for (i, a) in generators.iter().enumerate() {
            for (j, b) in generators.iter().enumerate() {
                if i != j && a.is_subset_of(b.vars()) {
                    return Err(Error::validation(format!("generator {a} is contained in {b}")));
                }
            }
        }
        let mut generators = generators;
        generators.sort();
        Ok(Self { generators })
    }

    /// Keeps only the maximal elements of `terms`.
    pub fn from_terms<'a>(terms: impl IntoIterator<Item = &'a Term>) -> Self {
        let all: BTreeSet<Term> = terms.into_iter().cloned().collect();
        let generators = all
            .iter()
            .filter(|a| !all.iter().any(|b| b != *a && a.is_subset_of(b.vars())))
            .cloned()
            .collect();
        Self { generators }
    }

    pub fn generators(&self) -> &[Term] {
        &self.generators
    }

    pub fn closure(&self) -> BTreeSet<Term> {
        hierarchical_closure(&self.generators)
    }
}

/// Graph joining every pair of variables that co-occur in a generator.
pub fn interaction_graph(gen: &GeneratingClass, p: usize) -> Graph {
    let mut g = Graph::new(p);
    for t in gen.generators() {
        let vs = t.vars();
        for (i, &u) in vs.iter().enumerate() {
            for &v in &vs[i + 1..] {
                g.add_edge(u, v);
            }
        }
    }
    g
}

/// Whether the generators are exactly the cliques of their interaction graph.
pub fn is_graphical(gen: &GeneratingClass, p: usize) -> bool {
    let g = interaction_graph(gen, p);
    let used: BTreeSet<usize> = gen
        .generators()
        .iter()
        .flat_map(|t| t.vars().iter().copied())
        .collect();
    let cliques: BTreeSet<Term> = g
        .maximal_cliques()
        .into_iter()
        .filter(|c| c.iter().all(|v| used.contains(v)))
        .map(Term::new)
        .collect();
    let gens: BTreeSet<Term> = gen
        .generators()
        .iter()
        .filter(|t| !t.is_intercept())
        .cloned()
        .collect();
    cliques == gens
}

/// Hierarchical log-linear model with one coefficient block per term.
///
/// `log p(i) = sum_a X_a(i_a) beta_a - log_partition`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLinearModel {
    schema: VariableSchema,
    #[serde(with = "term_blocks")]
    terms: BTreeMap<Term, Vec<f64>>,
    log_partition: Option<f64>,
}

mod term_blocks {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Block {
        vars: Vec<usize>,
        coefficients: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(terms: &BTreeMap<Term, Vec<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let blocks: Vec<Block> = terms
            .iter()
            .map(|(t, c)| Block {
                vars: t.vars().to_vec(),
                coefficients: c.clone(),
            })
            .collect();
        blocks.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<Term, Vec<f64>>, D::Error> {
        let blocks = Vec::<Block>::deserialize(d)?;
        Ok(blocks
            .into_iter()
            .map(|b| (Term::new(b.vars), b.coefficients))
            .collect())
    }
}

impl LogLinearModel {
    pub fn new(
        schema: VariableSchema,
        terms: BTreeMap<Term, Vec<f64>>,
        log_partition: Option<f64>,
    ) -> Result<Self> {
        let model = Self {
            schema,
            terms,
            log_partition,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.schema.levels();
        if !self.terms.contains_key(&Term::intercept()) {
            return Err(Error::validation("model has no intercept"));
        }
        for (t, beta) in &self.terms {
            check_subset(t.vars(), self.schema.len())?;
            if beta.len() != t.width(levels) {
                return Err(Error::validation(format!(
                    "term {t} has {} coefficients, expected {}",
                    beta.len(),
                    t.width(levels)
                )));
            }
            if beta.iter().any(|b| !b.is_finite()) {
                return Err(Error::validation(format!("term {t} has non-finite coefficients")));
            }
        }
        let closure = hierarchical_closure(self.terms.keys());
        if closure.len() != self.terms.len() {
            return Err(Error::validation("model term set is not hierarchical"));
        }
        Ok(())
    }

    /// Intercept-only model with intercept `c`.
    pub fn constant(schema: VariableSchema, c: f64) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(Term::intercept(), vec![c]);
        Self {
            schema,
            terms,
            log_partition: None,
        }
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn terms(&self) -> &BTreeMap<Term, Vec<f64>> {
        &self.terms
    }

    pub fn coefficients(&self, term: &Term) -> Option<&[f64]> {
        self.terms.get(term).map(Vec::as_slice)
    }

    pub fn intercept(&self) -> f64 {
        self.terms[&Term::intercept()][0]
    }

    pub fn log_partition(&self) -> Option<f64> {
        self.log_partition
    }

    pub fn set_log_partition(&mut self, value: Option<f64>) {
        self.log_partition = value;
    }

    /// Replaces a block; fails if the term is absent or the width is wrong.
    pub fn set_block(&mut self, term: &Term, beta: Vec<f64>) -> Result<()> {
        let width = term.width(self.schema.levels());
        match self.terms.get_mut(term) {
            Some(b) if beta.len() == width => {
                *b = beta;
                Ok(())
            }
            Some(_) => Err(Error::validation(format!("block {term} must have width {width}"))),
            None => Err(Error::validation(format!("term {term} is not in the model"))),
        }
    }

    /// Euclidean norm of a block (0 for absent terms).
    pub fn block_norm(&self, term: &Term) -> f64 {
        self.terms
            .get(term)
            .map_or(0.0, |b| b.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    /// Terms with at least one nonzero coefficient, excluding the intercept.
    pub fn active_terms(&self) -> impl Iterator<Item = &Term> {
        self.terms
            .iter()
            .filter(|(t, b)| !t.is_intercept() && b.iter().any(|&x| x != 0.0))
            .map(|(t, _)| t)
    }

    /// Unnormalized log-probability `sum_a X_a(i_a) beta_a`.
    pub fn eta(&self, cell: &[usize]) -> f64 {
        let levels = self.schema.levels();
        self.terms
            .iter()
            .map(|(t, beta)| {
                term_row(t, levels, cell)
                    .iter()
                    .zip(beta)
                    .map(|(x, b)| x * b)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Normalized log-probability; requires the log-partition to be set.
    pub fn log_prob(&self, cell: &[usize]) -> Result<f64> {
        let z = self
            .log_partition
            .ok_or_else(|| Error::validation("model is not normalized"))?;
        self.schema.check_cell(cell)?;
        Ok(self.eta(cell) - z)
    }

    /// Builds a model over a small schema from Kronecker-ordered coefficients,
    /// keeping only `terms` (which must be hierarchical and include the intercept).
    pub fn from_kron(
        schema: VariableSchema,
        basis: &Basis,
        coef: &[f64],
        terms: &BTreeSet<Term>,
    ) -> Result<Self> {
        let map = terms
            .iter()
            .map(|t| {
                let beta = basis.block_positions(t).into_iter().map(|j| coef[j]).collect();
                (t.clone(), beta)
            })
            .collect();
        Self::new(schema, map, None)
    }

    /// Kronecker-ordered coefficient vector (terms absent from the model are 0).
    pub fn to_kron(&self, basis: &Basis) -> Vec<f64> {
        let mut coef = vec![0.0; basis.num_cells()];
        for (t, beta) in &self.terms {
            for (j, b) in basis.block_positions(t).into_iter().zip(beta) {
                coef[j] = *b;
            }
        }
        coef
    }

    /// Log-probabilities of every cell (small schemas only), normalized by
    /// log-sum-exp regardless of the stored log-partition.
    pub fn dense_log_probs(&self, max_cells: usize) -> Result<Vec<f64>> {
        let basis = Basis::new(self.schema.levels(), max_cells)?;
        let eta = basis.synthesize(&self.to_kron(&basis));
        let z = crate::numeric::log_sum_exp(&eta);
        Ok(eta.into_iter().map(|e| e - z).collect())
    }
}
