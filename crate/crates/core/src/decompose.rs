//! Recursive thinning and clique split-off: starting from the complete graph,
//! delete the weakest edges (by symmetrized importance rank) until the
//! triangulated graph has a small enough leaf clique, split it off, repeat.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    chordal_cliques, cliques_and_separators, is_decomposable, minimal_triangulation, minimal_triangulation_with_fill,
    CliqueDecomposition, Graph,
};
use crate::schema::{tabulate_with_limit, ContingencyTable, Dataset};

/// One split-off step: clique `clique = separator ∪ residual`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub clique: Vec<usize>,
    pub separator: Vec<usize>,
    pub residual: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionPlan {
    pub num_vars: usize,
    pub smax: usize,
    pub records: Vec<PlanRecord>,
    /// Junction tree over the union of recorded cliques.
    pub decomposition: CliqueDecomposition,
    /// Deleted edges, in deletion order.
    pub deleted: Vec<(usize, usize)>,
    /// Triangulation fill edges kept because they lie inside a separator.
    pub fill: Vec<(usize, usize)>,
}

impl DecompositionPlan {
    /// Plan with a single record covering all variables.
    pub fn single_clique(p: usize) -> Self {
        let all: Vec<usize> = (0..p).collect();
        Self {
            num_vars: p,
            smax: p,
            records: vec![PlanRecord {
                clique: all.clone(),
                separator: Vec::new(),
                residual: all.clone(),
            }],
            decomposition: CliqueDecomposition::from_cliques(vec![all]),
            deleted: Vec::new(),
            fill: Vec::new(),
        }
    }

    /// Plan whose decomposition is given directly (for a known chordal graph).
    pub fn from_decomposition(p: usize, decomposition: CliqueDecomposition) -> Result<Self> {
        if decomposition.vertices() != (0..p).collect::<Vec<_>>() {
            return Err(Error::validation("decomposition must cover all variables"));
        }
        let smax = decomposition.cliques.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            num_vars: p,
            smax,
            records: Vec::new(),
            decomposition,
            deleted: Vec::new(),
            fill: Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.decomposition;
        if d.vertices() != (0..self.num_vars).collect::<Vec<_>>() {
            return Err(Error::validation("plan decomposition does not cover all variables"));
        }
        if d.cliques.iter().any(|c| c.len() > self.smax) {
            return Err(Error::validation("plan clique exceeds smax"));
        }
        if !d.has_running_intersection() {
            return Err(Error::validation("plan decomposition lacks running intersection"));
        }
        Ok(())
    }
}

fn key(u: usize, v: usize) -> (usize, usize) {
    (u.min(v), u.max(v))
}

/// Runs the thinning / split-off loop on a symmetric `p x p` rank matrix.
///
/// The clique taken at each step is a minimum-cardinality maximal clique that
/// owns a vertex with no neighbours outside it (ties: lexicographic); its
/// separator is the part adjacent to the rest. Separator edges are kept
/// complete and never deleted afterwards, so the recorded cliques always form
/// a chordal graph.
pub fn decompose(rtilde: &[Vec<f64>], smax: usize) -> Result<DecompositionPlan> {
    let p = rtilde.len();
    if smax < 2 {
        return Err(Error::validation("smax must be at least 2"));
    }
    if p == 0 || rtilde.iter().any(|r| r.len() != p) {
        return Err(Error::validation("rank matrix must be square and nonempty"));
    }
    for i in 0..p {
        for j in 0..i {
            let (a, b) = (rtilde[i][j], rtilde[j][i]);
            if a != b && !(a.is_nan() && b.is_nan()) {
                return Err(Error::validation(format!("rank matrix not symmetric at ({j}, {i})")));
            }
            if a.is_nan() {
                return Err(Error::validation(format!("rank matrix has NaN at ({j}, {i})")));
            }
        }
    }
    let mut rank: Vec<Vec<f64>> = rtilde.to_vec();
    let mut g = Graph::complete(p);
    // edges that must stay: carried separators plus any infinite input ranks
    let mut protected = Graph::new(p);
    for (u, v) in g.edges() {
        if rank[u][v].is_infinite() {
            protected.add_edge(u, v);
        }
    }
    if !fits(&protected, smax) {
        return Err(Error::validation(format!("edges with infinite rank force a clique above smax = {smax}")));
    }
    let mut records = Vec::new();
    let mut deleted = Vec::new();
    let mut carried_fill = Vec::new();
    while g.num_vertices() > 0 {
        let (tri, fill) = minimal_triangulation_with_fill(&g);
        let peo = is_decomposable(&tri).expect("triangulation is chordal");
        let cliques = chordal_cliques(&tri, &peo);
        let mut leaves: Vec<&Vec<usize>> = cliques
            .iter()
            .filter(|c| {
                c.iter()
                    .any(|&v| tri.neighbors(v).iter().all(|u| c.binary_search(u).is_ok()))
            })
            .collect();
        leaves.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        let smallest = leaves[0].clone();
        // A split is taken only if the edges that would then be protected can
        // still be triangulated within smax; otherwise the loop could end up
        // with an undeletable clique that is too large.
        let split = leaves.iter().filter(|c| c.len() <= smax).find_map(|&pick| {
            let (separator, residual): (Vec<usize>, Vec<usize>) = pick
                .iter()
                .partition(|&&v| tri.neighbors(v).iter().any(|u| pick.binary_search(u).is_err()));
            let keep: Vec<usize> = g.vertices().filter(|v| residual.binary_search(v).is_err()).collect();
            let mut next = protected.induced(&keep);
            for (i, &u) in separator.iter().enumerate() {
                for &v in &separator[i + 1..] {
                    next.add_edge(u, v);
                }
            }
            fits(&next, smax).then(|| (pick.clone(), separator, residual, keep, next))
        });
        if let Some((pick, separator, residual, keep, next)) = split {
            log::debug!("split off {pick:?} with separator {separator:?}");
            // Fill is recomputed next round; only separator edges (fill or
            // not) are carried over, and they can never be deleted.
            g = g.induced(&keep);
            protected = next;
            for (i, &u) in separator.iter().enumerate() {
                for &v in &separator[i + 1..] {
                    rank[u][v] = f64::INFINITY;
                    rank[v][u] = f64::INFINITY;
                    if g.add_edge(u, v) && fill.contains(&key(u, v)) {
                        carried_fill.push((u, v));
                    }
                }
            }
            records.push(PlanRecord {
                clique: pick,
                separator,
                residual,
            });
            continue;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for (u, v) in g.edges() {
            let r = rank[u][v];
            if r.is_finite() && best.is_none_or(|(b, _, _)| r < b) {
                best = Some((r, u, v));
            }
        }
        if let Some((_, u, v)) = best {
            log::debug!("delete ({u}, {v}) in favour of leaf clique {smallest:?}");
            g.remove_edge(u, v);
            rank[u][v] = f64::INFINITY;
            rank[v][u] = f64::INFINITY;
            deleted.push(key(u, v));
            continue;
        }
        // Only protected edges are left and they triangulate within smax, so
        // freezing the fill makes the graph chordal and every later leaf fits.
        if tri.maximal_cliques().iter().any(|c| c.len() > smax) {
            return Err(Error::validation(format!(
                "no deletable edge left but the smallest leaf clique {smallest:?} exceeds smax = {smax}"
            )));
        }
        log::debug!("freezing fill {fill:?}");
        for &(u, v) in &fill {
            g.add_edge(u, v);
            protected.add_edge(u, v);
            carried_fill.push((u, v));
        }
    }
    let mut union = Graph::new(p);
    for r in &records {
        for (i, &u) in r.clique.iter().enumerate() {
            for &v in &r.clique[i + 1..] {
                union.add_edge(u, v);
            }
        }
    }
    carried_fill.sort_unstable();
    carried_fill.dedup();
    let plan = DecompositionPlan {
        num_vars: p,
        smax,
        records,
        decomposition: cliques_and_separators(&union)?,
        deleted,
        fill: carried_fill,
    };
    plan.validate()?;
    Ok(plan)
}

fn fits(g: &Graph, smax: usize) -> bool {
    minimal_triangulation(g).maximal_cliques().iter().all(|c| c.len() <= smax)
}

/// Clique and separator tables of the plan's final decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedTables {
    pub cliques: Vec<ContingencyTable>,
    pub separators: Vec<ContingencyTable>,
}

pub fn collapse_on_plan(data: &Dataset, plan: &DecompositionPlan, max_cells: usize) -> Result<CollapsedTables> {
    if data.schema().len() != plan.num_vars {
        return Err(Error::validation(format!(
            "plan covers {} variables, dataset has {}",
            plan.num_vars,
            data.schema().len()
        )));
    }
    let d = &plan.decomposition;
    let cliques = d
        .cliques
        .iter()
        .map(|c| tabulate_with_limit(data, c, max_cells))
        .collect::<Result<_>>()?;
    let separators = d
        .separators
        .iter()
        .map(|s| tabulate_with_limit(data, &s.vars, max_cells))
        .collect::<Result<_>>()?;
    Ok(CollapsedTables { cliques, separators })
}
