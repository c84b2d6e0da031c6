//! Undirected graphs, chordality, minimal triangulation and clique
//! decompositions with junction trees.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simple undirected graph on vertex ids `0..capacity`; ids may be absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    present: Vec<bool>,
    adj: Vec<BTreeSet<usize>>,
}

impl Graph {
    /// Edgeless graph on `0..n`.
    pub fn new(n: usize) -> Self {
        Self {
            present: vec![true; n],
            adj: vec![BTreeSet::new(); n],
        }
    }

    pub fn complete(n: usize) -> Self {
        let mut g = Self::new(n);
        for u in 0..n {
            for v in u + 1..n {
                g.add_edge(u, v);
            }
        }
        g
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut g = Self::new(n);
        for &(u, v) in edges {
            g.add_edge(u, v);
        }
        g
    }

    /// Number of vertex ids (present or not).
    pub fn capacity(&self) -> usize {
        self.present.len()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.present.get(v).copied().unwrap_or(false)
    }

    pub fn vertices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.present.len()).filter(move |&v| self.present[v])
    }

    pub fn num_vertices(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn neighbors(&self, v: usize) -> &BTreeSet<usize> {
        &self.adj[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj.get(u).is_some_and(|a| a.contains(&v))
    }

    /// Adds `u - v`; self-loops and edges to absent vertices are ignored.
    pub fn add_edge(&mut self, u: usize, v: usize) -> bool {
        if u == v || !self.contains(u) || !self.contains(v) {
            return false;
        }
        self.adj[v].insert(u);
        self.adj[u].insert(v)
    }

    pub fn remove_edge(&mut self, u: usize, v: usize) -> bool {
        if u == v || u >= self.adj.len() || v >= self.adj.len() {
            return false;
        }
        self.adj[v].remove(&u);
        self.adj[u].remove(&v)
    }

    /// Edges `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in self.vertices() {
            for &v in self.adj[u].range(u + 1..) {
                out.push((u, v));
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    /// Subgraph induced by `keep` (other ids become absent).
    pub fn induced(&self, keep: &[usize]) -> Graph {
        let mut present = vec![false; self.capacity()];
        for &v in keep {
            if self.contains(v) {
                present[v] = true;
            }
        }
        let adj = (0..self.capacity())
            .map(|v| {
                if present[v] {
                    self.adj[v].iter().copied().filter(|&u| present[u]).collect()
                } else {
                    BTreeSet::new()
                }
            })
            .collect();
        Graph { present, adj }
    }

    pub fn remove_vertex(&mut self, v: usize) {
        if !self.contains(v) {
            return;
        }
        for u in std::mem::take(&mut self.adj[v]) {
            self.adj[u].remove(&v);
        }
        self.present[v] = false;
    }

    pub fn is_complete_set(&self, set: &[usize]) -> bool {
        set.iter()
            .enumerate()
            .all(|(i, &u)| set[i + 1..].iter().all(|&v| self.has_edge(u, v)))
    }

    /// Connected components, each sorted; components ordered by smallest vertex.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.capacity()];
        let mut out = Vec::new();
        for s in self.vertices() {
            if seen[s] {
                continue;
            }
            let mut comp = vec![s];
            seen[s] = true;
            let mut i = 0;
            while i < comp.len() {
                let u = comp[i];
                i += 1;
                for &w in &self.adj[u] {
                    if !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Maximal cliques of an arbitrary graph (Bron-Kerbosch with pivoting),
    /// each sorted, in lexicographic order.
    pub fn maximal_cliques(&self) -> Vec<Vec<usize>> {
        fn expand(
            g: &Graph,
            r: &mut Vec<usize>,
            mut p: BTreeSet<usize>,
            mut x: BTreeSet<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            if p.is_empty() {
                if x.is_empty() {
                    let mut c = r.clone();
                    c.sort_unstable();
                    out.push(c);
                }
                return;
            }
            let pivot = p
                .iter()
                .chain(x.iter())
                .copied()
                .max_by_key(|&u| (p.intersection(&g.adj[u]).count(), Reverse(u)))
                .expect("p is nonempty");
            let candidates: Vec<usize> = p.difference(&g.adj[pivot]).copied().collect();
            for v in candidates {
                r.push(v);
                let np = p.intersection(&g.adj[v]).copied().collect();
                let nx = x.intersection(&g.adj[v]).copied().collect();
                expand(g, r, np, nx, out);
                r.pop();
                p.remove(&v);
                x.insert(v);
            }
        }
        let mut out = Vec::new();
        expand(self, &mut Vec::new(), self.vertices().collect(), BTreeSet::new(), &mut out);
        out.sort();
        out
    }

    /// Maximum cardinality search visit order (ties to the smallest id).
    fn mcs_order(&self) -> Vec<usize> {
        let n = self.capacity();
        let mut weight = vec![0usize; n];
        let mut numbered = vec![false; n];
        let mut order = Vec::with_capacity(self.num_vertices());
        for _ in 0..self.num_vertices() {
            let v = self
                .vertices()
                .filter(|&v| !numbered[v])
                .max_by_key(|&v| (weight[v], Reverse(v)))
                .expect("unnumbered vertex remains");
            numbered[v] = true;
            order.push(v);
            for &u in &self.adj[v] {
                if !numbered[u] {
                    weight[u] += 1;
                }
            }
        }
        order
    }
}

/// Chordality test by maximum cardinality search. Returns a perfect
/// elimination order (first vertex eliminated first) when the graph is chordal.
pub fn is_decomposable(g: &Graph) -> Option<Vec<usize>> {
    let visit = g.mcs_order();
    let mut pos = vec![usize::MAX; g.capacity()];
    for (i, &v) in visit.iter().enumerate() {
        pos[v] = i;
    }
    for &v in &visit {
        // earlier-visited neighbours must form a clique; check against the latest one
        let earlier: Vec<usize> = g.adj[v].iter().copied().filter(|&u| pos[u] < pos[v]).collect();
        if let Some(&parent) = earlier.iter().max_by_key(|&&u| pos[u]) {
            for &u in &earlier {
                if u != parent && !g.has_edge(u, parent) {
                    return None;
                }
            }
        }
    }
    let mut peo = visit;
    peo.reverse();
    Some(peo)
}

/// Minimal triangulation by MCS-M. The result contains `g`, is chordal, and
/// no fill edge can be removed without losing chordality.
pub fn minimal_triangulation(g: &Graph) -> Graph {
    minimal_triangulation_with_fill(g).0
}

/// Like [`minimal_triangulation`] but also returns the fill edges (`u < v`).
pub fn minimal_triangulation_with_fill(g: &Graph) -> (Graph, Vec<(usize, usize)>) {
    if is_decomposable(g).is_some() {
        return (g.clone(), Vec::new());
    }
    let n = g.capacity();
    let mut h = g.clone();
    let mut weight = vec![0usize; n];
    let mut numbered = vec![false; n];
    let mut fill = Vec::new();
    for _ in 0..g.num_vertices() {
        let v = g
            .vertices()
            .filter(|&v| !numbered[v])
            .max_by_key(|&v| (weight[v], Reverse(v)))
            .expect("unnumbered vertex remains");
        // Bottleneck search: for each unnumbered u, the smallest possible
        // maximum weight of interior vertices on a path v ~> u through
        // unnumbered vertices.
        let mut best = vec![usize::MAX; n];
        let mut reached = Vec::new();
        let mut heap = BinaryHeap::new();
        for &u in &g.adj[v] {
            if !numbered[u] {
                // direct neighbours have no interior vertices
                best[u] = 0;
                heap.push(Reverse((0usize, u, true)));
            }
        }
        let mut done = vec![false; n];
        while let Some(Reverse((b, u, direct))) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            reached.push((u, b, direct));
            let through = if direct { weight[u] } else { b.max(weight[u]) };
            for &w in &g.adj[u] {
                if numbered[w] || w == v || done[w] {
                    continue;
                }
                if through < best[w] {
                    best[w] = through;
                    heap.push(Reverse((through, w, false)));
                }
            }
        }
        let mut raise = Vec::new();
        for (u, b, direct) in reached {
            if direct || b < weight[u] {
                raise.push(u);
            }
        }
        for u in raise {
            weight[u] += 1;
            if !h.has_edge(u, v) {
                h.add_edge(u, v);
                fill.push((u.min(v), u.max(v)));
            }
        }
        numbered[v] = true;
    }
    fill.sort_unstable();
    (h, fill)
}

/// Maximal cliques of a chordal graph from its perfect elimination order.
pub fn chordal_cliques(g: &Graph, peo: &[usize]) -> Vec<Vec<usize>> {
    let mut pos = vec![usize::MAX; g.capacity()];
    for (i, &v) in peo.iter().enumerate() {
        pos[v] = i;
    }
    let mut candidates: Vec<Vec<usize>> = peo
        .iter()
        .map(|&v| {
            let mut c: Vec<usize> = g.adj[v].iter().copied().filter(|&u| pos[u] > pos[v]).collect();
            c.push(v);
            c.sort_unstable();
            c
        })
        .collect();
    candidates.sort_by_key(|c| Reverse(c.len()));
    let mut maximal: Vec<Vec<usize>> = Vec::new();
    for c in candidates {
        if !maximal.iter().any(|m| c.iter().all(|v| m.binary_search(v).is_ok())) {
            maximal.push(c);
        }
    }
    maximal.sort();
    maximal
}

/// An edge of the junction tree joining cliques `a` and `b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeEdge {
    pub a: usize,
    pub b: usize,
    pub separator: Vec<usize>,
}

/// A distinct separator set with its index (junction-tree multiplicity).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Separator {
    pub vars: Vec<usize>,
    pub index: usize,
}

/// Cliques, separators with indices, and junction-tree edges of a chordal graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliqueDecomposition {
    pub cliques: Vec<Vec<usize>>,
    pub separators: Vec<Separator>,
    pub tree_edges: Vec<TreeEdge>,
}

impl CliqueDecomposition {
    /// Builds the decomposition from given maximal cliques using a
    /// maximum-weight spanning forest on intersection sizes.
    pub fn from_cliques(mut cliques: Vec<Vec<usize>>) -> Self {
        for c in &mut cliques {
            c.sort_unstable();
        }
        cliques.sort();
        let k = cliques.len();
        let mut pairs = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                let w = intersect(&cliques[i], &cliques[j]).len();
                if w > 0 {
                    pairs.push((Reverse(w), i, j));
                }
            }
        }
        pairs.sort();
        let mut parent: Vec<usize> = (0..k).collect();
        fn find(parent: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while parent[r] != r {
                r = parent[r];
            }
            let mut y = x;
            while parent[y] != r {
                let next = parent[y];
                parent[y] = r;
                y = next;
            }
            r
        }
        let mut tree_edges = Vec::new();
        for (_, i, j) in pairs {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri] = rj;
                tree_edges.push(TreeEdge {
                    a: i,
                    b: j,
                    separator: intersect(&cliques[i], &cliques[j]),
                });
            }
        }
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for e in &tree_edges {
            *counts.entry(e.separator.clone()).or_default() += 1;
        }
        let separators = counts
            .into_iter()
            .map(|(vars, index)| Separator { vars, index })
            .collect();
        Self {
            cliques,
            separators,
            tree_edges,
        }
    }

    pub fn index_of(&self, separator: &[usize]) -> usize {
        self.separators
            .iter()
            .find(|s| s.vars == separator)
            .map_or(0, |s| s.index)
    }

    /// Vertices covered by the cliques, sorted.
    pub fn vertices(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.cliques.iter().flatten().copied().collect();
        set.into_iter().collect()
    }

    /// Number of connected components of the junction forest.
    pub fn num_components(&self) -> usize {
        self.cliques.len() - self.tree_edges.len()
    }

    /// Index of the first clique containing every variable of `vars`.
    pub fn covering_clique(&self, vars: &[usize]) -> Option<usize> {
        self.cliques
            .iter()
            .position(|c| vars.iter().all(|v| c.binary_search(v).is_ok()))
    }

    /// Graph whose edges join every pair inside a clique.
    pub fn to_graph(&self, n: usize) -> Graph {
        let mut g = Graph::new(n);
        for c in &self.cliques {
            for (i, &u) in c.iter().enumerate() {
                for &v in &c[i + 1..] {
                    g.add_edge(u, v);
                }
            }
        }
        g
    }

    /// Running-intersection check: for every vertex, the cliques containing
    /// it induce a connected subtree.
    pub fn has_running_intersection(&self) -> bool {
        for v in self.vertices() {
            let holders: Vec<usize> = (0..self.cliques.len())
                .filter(|&i| self.cliques[i].binary_search(&v).is_ok())
                .collect();
            let mut reached = vec![holders[0]];
            let mut changed = true;
            while changed {
                changed = false;
                for e in &self.tree_edges {
                    if e.separator.binary_search(&v).is_err() {
                        continue;
                    }
                    for (x, y) in [(e.a, e.b), (e.b, e.a)] {
                        if reached.contains(&x) && !reached.contains(&y) {
                            reached.push(y);
                            changed = true;
                        }
                    }
                }
            }
            if reached.len() != holders.len() {
                return false;
            }
        }
        true
    }
}

/// Maximal cliques, separators with indices and a junction tree of a chordal graph.
pub fn cliques_and_separators(g: &Graph) -> Result<CliqueDecomposition> {
    let peo = is_decomposable(g).ok_or(Error::NotChordal)?;
    Ok(CliqueDecomposition::from_cliques(chordal_cliques(g, &peo)))
}

pub(crate) fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().copied().filter(|v| b.binary_search(v).is_ok()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cycle(n: usize) -> Graph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Graph::from_edges(n, &edges)
    }

    /// Brute-force chordality: every cycle of length >= 4 has a chord, checked
    /// by repeatedly eliminating simplicial vertices.
    fn chordal_oracle(g: &Graph) -> bool {
        let mut h = g.clone();
        loop {
            let vs: Vec<usize> = h.vertices().collect();
            if vs.is_empty() {
                return true;
            }
            let simplicial = vs.iter().copied().find(|&v| {
                let nb: Vec<usize> = h.neighbors(v).iter().copied().collect();
                h.is_complete_set(&nb)
            });
            match simplicial {
                Some(v) => h.remove_vertex(v),
                None => return false,
            }
        }
    }

    #[test]
    fn decomposability_examples() {
        assert!(is_decomposable(&Graph::complete(3)).is_some());
        assert!(is_decomposable(&cycle(4)).is_none());
        let tree = Graph::from_edges(6, &[(0, 1), (0, 2), (2, 3), (2, 4), (4, 5)]);
        assert!(is_decomposable(&tree).is_some());
    }

    #[test]
    fn triangulation_examples() {
        let chordal = Graph::from_edges(4, &[(0, 1), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(minimal_triangulation(&chordal), chordal);

        let (h4, fill4) = minimal_triangulation_with_fill(&cycle(4));
        assert_eq!(fill4.len(), 1);
        assert!(is_decomposable(&h4).is_some());

        let (h5, fill5) = minimal_triangulation_with_fill(&cycle(5));
        assert_eq!(fill5.len(), 2);
        assert!(is_decomposable(&h5).is_some());
    }

    #[test]
    fn cycle_chords_oracle() {
        // Both chords of a 4-cycle triangulate it; no single chord does for a 5-cycle.
        for chord in [(0, 2), (1, 3)] {
            let mut g = cycle(4);
            g.add_edge(chord.0, chord.1);
            assert!(chordal_oracle(&g));
        }
        let c5 = cycle(5);
        let non_edges: Vec<(usize, usize)> = (0..5)
            .flat_map(|u| (u + 1..5).map(move |v| (u, v)))
            .filter(|&(u, v)| !c5.has_edge(u, v))
            .collect();
        for &e in &non_edges {
            let mut g = c5.clone();
            g.add_edge(e.0, e.1);
            assert!(!chordal_oracle(&g));
        }
        assert!(non_edges.iter().enumerate().any(|(i, &e)| non_edges[i + 1..].iter().any(|&f| {
            let mut g = c5.clone();
            g.add_edge(e.0, e.1);
            g.add_edge(f.0, f.1);
            chordal_oracle(&g)
        })));
    }

    #[test]
    fn separator_index_examples() {
        // star centred at vertex 1 (labels shifted by one)
        let star = Graph::from_edges(4, &[(0, 1), (1, 2), (1, 3)]);
        let d = cliques_and_separators(&star).unwrap();
        assert_eq!(d.cliques, vec![vec![0, 1], vec![1, 2], vec![1, 3]]);
        assert_eq!(d.separators, vec![Separator { vars: vec![1], index: 2 }]);

        let fig_e = Graph::from_edges(4, &[(0, 1), (1, 2), (1, 3), (2, 3)]);
        let d = cliques_and_separators(&fig_e).unwrap();
        assert_eq!(d.cliques, vec![vec![0, 1], vec![1, 2, 3]]);
        assert_eq!(d.index_of(&[1]), 1);

        let path = Graph::from_edges(3, &[(0, 1), (1, 2)]);
        let d = cliques_and_separators(&path).unwrap();
        assert_eq!(d.cliques, vec![vec![0, 1], vec![1, 2]]);
        assert_eq!(d.index_of(&[1]), 1);

        assert!(matches!(cliques_and_separators(&cycle(4)), Err(Error::NotChordal)));
    }

    #[test]
    fn disconnected_graph_forest() {
        let g = Graph::from_edges(5, &[(0, 1), (2, 3)]);
        let d = cliques_and_separators(&g).unwrap();
        assert_eq!(d.cliques, vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert!(d.tree_edges.is_empty());
        assert_eq!(d.num_components(), 3);
    }

    #[test]
    fn bron_kerbosch_on_small_graphs() {
        let g = Graph::from_edges(5, &[(0, 1), (1, 2), (0, 2), (2, 3), (3, 4)]);
        assert_eq!(g.maximal_cliques(), vec![vec![0, 1, 2], vec![2, 3], vec![3, 4]]);
    }

    fn random_graph(n: usize, density: f64, seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(n);
        for u in 0..n {
            for v in u + 1..n {
                if rng.random::<f64>() < density {
                    g.add_edge(u, v);
                }
            }
        }
        g
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn mcs_agrees_with_simplicial_elimination(n in 1usize..9, density in 0.1f64..0.9, seed in any::<u64>()) {
            let g = random_graph(n, density, seed);
            prop_assert_eq!(is_decomposable(&g).is_some(), chordal_oracle(&g));
        }

        #[test]
        fn triangulation_is_minimal(n in 1usize..9, density in 0.1f64..0.7, seed in any::<u64>()) {
            let g = random_graph(n, density, seed);
            let (h, fill) = minimal_triangulation_with_fill(&g);
            prop_assert!(is_decomposable(&h).is_some());
            for (u, v) in g.edges() {
                prop_assert!(h.has_edge(u, v));
            }
            prop_assert_eq!(h.num_edges(), g.num_edges() + fill.len());
            for &(u, v) in &fill {
                let mut reduced = h.clone();
                reduced.remove_edge(u, v);
                prop_assert!(!chordal_oracle(&reduced), "fill edge {:?} removable", (u, v));
            }
        }

        #[test]
        fn junction_tree_identities(n in 1usize..10, density in 0.1f64..0.8, seed in any::<u64>()) {
            let h = minimal_triangulation(&random_graph(n, density, seed));
            let d = cliques_and_separators(&h).unwrap();
            let nu: usize = d.separators.iter().map(|s| s.index).sum();
            prop_assert_eq!(nu, d.cliques.len() - h.components().len());
            prop_assert!(d.has_running_intersection());
            for e in &d.tree_edges {
                prop_assert_eq!(&e.separator, &intersect(&d.cliques[e.a], &d.cliques[e.b]));
            }
            prop_assert_eq!(d.cliques.clone(), h.maximal_cliques());
        }
    }
}
