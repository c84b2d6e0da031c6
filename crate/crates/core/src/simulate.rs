//! Random decomposable graphs and pairwise models for simulation studies.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::{LogLinearModel, Term};
use crate::error::{Error, Result};
use crate::graph::{cliques_and_separators, CliqueDecomposition, Graph};
use crate::junction::{normalize, JunctionTree};
use crate::schema::{Dataset, VariableSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub num_vars: usize,
    pub levels: usize,
    pub max_clique: usize,
    /// Range of absolute values for pairwise coefficients; signs are random.
    pub coupling: (f64, f64),
    /// Main-effect coefficients are uniform on `[-main_effect, main_effect]`.
    pub main_effect: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            num_vars: 15,
            levels: 2,
            max_clique: 3,
            coupling: (0.4, 0.8),
            main_effect: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedModel {
    pub graph_edges: Vec<(usize, usize)>,
    pub decomposition: CliqueDecomposition,
    /// Normalized pairwise model whose interaction graph is `graph_edges`.
    pub model: LogLinearModel,
}

impl SimulatedModel {
    pub fn graph(&self) -> Graph {
        Graph::from_edges(self.model.schema().len(), &self.graph_edges)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        Ok(JunctionTree::calibrate(&self.model, &self.decomposition)?.sample(n, seed))
    }
}

/// Grows a chordal graph one simplicial vertex at a time: each new vertex is
/// joined to a random nonempty subset of a random earlier clique, keeping
/// every clique within `max_clique`.
pub fn random_chordal_graph(p: usize, max_clique: usize, rng: &mut impl Rng) -> Graph {
    let mut g = Graph::new(p);
    if p == 0 {
        return g;
    }
    let mut cliques: Vec<Vec<usize>> = vec![vec![0]];
    for v in 1..p {
        let base = cliques[rng.random_range(0..cliques.len())].clone();
        let most = base.len().min(max_clique.saturating_sub(1));
        if most == 0 {
            cliques.push(vec![v]);
            continue;
        }
        let k = rng.random_range(1..=most);
        let mut c: Vec<usize> = sample(rng, base.len(), k).into_iter().map(|i| base[i]).collect();
        for &u in &c {
            g.add_edge(u, v);
        }
        c.push(v);
        c.sort_unstable();
        cliques.push(c);
    }
    g
}

pub fn random_decomposable_model(cfg: &SimulationConfig) -> Result<SimulatedModel> {
    if cfg.levels < 2 || cfg.max_clique < 1 {
        return Err(Error::validation("need at least 2 levels and max_clique >= 1"));
    }
    let (lo, hi) = cfg.coupling;
    if !(0.0 <= lo && lo <= hi && hi.is_finite()) || !(cfg.main_effect >= 0.0) {
        return Err(Error::validation("bad coefficient ranges"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = cfg.num_vars;
    let graph = random_chordal_graph(p, cfg.max_clique, &mut rng);
    let schema = VariableSchema::anonymous(vec![cfg.levels; p])?;
    let w = cfg.levels - 1;
    let mut terms = BTreeMap::new();
    terms.insert(Term::intercept(), vec![0.0]);
    for v in 0..p {
        let b = (0..w).map(|_| rng.random_range(-1.0..=1.0) * cfg.main_effect).collect();
        terms.insert(Term::new(vec![v]), b);
    }
    let edges = graph.edges();
    for &(u, v) in &edges {
        // the block's norm lies in the coupling range
        let dir: Vec<f64> = (0..w * w).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let len = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let size = rng.random_range(lo..=hi);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let b = if w == 1 {
            vec![sign * size]
        } else {
            dir.iter().map(|x| x / len * size).collect()
        };
        terms.insert(Term::new(vec![u, v]), b);
    }
    let mut model = LogLinearModel::new(schema, terms, None)?;
    let decomposition = cliques_and_separators(&graph)?;
    normalize(&mut model, &decomposition)?;
    Ok(SimulatedModel {
        graph_edges: edges,
        decomposition,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::is_decomposable;

    #[test]
    fn graphs_are_chordal_with_bounded_cliques() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let g = random_chordal_graph(15, 3, &mut rng);
            assert!(is_decomposable(&g).is_some());
            assert!(g.maximal_cliques().iter().all(|c| c.len() <= 3));
            assert_eq!(g.components().len(), 1);
        }
    }

    #[test]
    fn model_matches_graph_and_is_reproducible() {
        let cfg = SimulationConfig {
            seed: 11,
            ..SimulationConfig::default()
        };
        let a = random_decomposable_model(&cfg).unwrap();
        let b = random_decomposable_model(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(crate::combine::extract_graph(&a.model).edges(), a.graph_edges);
        for (u, v) in &a.graph_edges {
            let n = a.model.block_norm(&Term::new(vec![*u, *v]));
            assert!((0.4..=0.8).contains(&n));
        }
        let d1 = a.sample(500, 3).unwrap();
        let d2 = b.sample(500, 3).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn multilevel_blocks_have_the_requested_norm() {
        let cfg = SimulationConfig {
            num_vars: 6,
            levels: 3,
            seed: 2,
            ..SimulationConfig::default()
        };
        let m = random_decomposable_model(&cfg).unwrap();
        for (u, v) in &m.graph_edges {
            let n = m.model.block_norm(&Term::new(vec![*u, *v]));
            assert!((0.4 - 1e-12..=0.8 + 1e-12).contains(&n));
        }
    }
}
