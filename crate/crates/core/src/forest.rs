//! Classification forests over categorical covariates.
//!
//! CART trees with Gini splits on binary level partitions, grown on bootstrap
//! samples, plus out-of-bag permutation importance.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::Dataset;

/// Levels up to this count get an exhaustive subset search at each split.
const EXACT_SPLIT_LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Candidate covariates per split; `None` means `floor(sqrt(p - 1))`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    /// Bootstrap sample size per tree; `None` means `n`.
    pub sample_size: Option<usize>,
    /// Upper bound on out-of-bag rows kept per tree for importance.
    pub max_oob: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 500,
            mtry: None,
            min_leaf: 5,
            max_depth: None,
            sample_size: None,
            max_oob: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    fn mtry_for(&self, p: usize) -> Result<usize> {
        let covariates = p - 1;
        let m = self
            .mtry
            .unwrap_or_else(|| ((covariates as f64).sqrt().floor() as usize).max(1));
        if m == 0 || m > covariates {
            return Err(Error::validation(format!(
                "mtry must lie in [1, {covariates}], got {m}"
            )));
        }
        Ok(m)
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if p < 2 {
            return Err(Error::validation("a forest needs at least one covariate"));
        }
        if self.n_trees == 0 {
            return Err(Error::validation("forest needs at least one tree"));
        }
        if self.min_leaf == 0 {
            return Err(Error::validation("min_leaf must be positive"));
        }
        if self.sample_size == Some(0) {
            return Err(Error::validation("bootstrap sample size must be positive"));
        }
        self.mtry_for(p).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf { class: u16 },
    Split { var: usize, left: Vec<u64>, lo: usize, hi: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    uses: Vec<bool>,
}

impl Tree {
    fn predict_by(&self, value: impl Fn(usize) -> usize) -> u16 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { class } => return *class,
                Node::Split { var, left, lo, hi } => {
                    let l = value(*var);
                    let goes_left = left.get(l >> 6).is_some_and(|w| (w >> (l & 63)) & 1 == 1);
                    i = if goes_left { *lo } else { *hi };
                }
            }
        }
    }

    pub fn predict(&self, row: &[u16]) -> u16 {
        self.predict_by(|v| row[v] as usize)
    }

    /// Whether any split uses covariate `v`.
    pub fn uses(&self, v: usize) -> bool {
        self.uses[v]
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { lo, hi, .. } => 1 + go(nodes, *lo).max(go(nodes, *hi)),
            }
        }
        go(&self.nodes, 0)
    }
}

/// A fitted forest for one response variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    response: usize,
    n_classes: usize,
    trees: Vec<Tree>,
    oob: Vec<Vec<u32>>,
    degenerate: bool,
}

impl Forest {
    pub fn response(&self) -> usize {
        self.response
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// True when the response was constant; importances are then all zero.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Majority vote over all trees (ties to the lowest class).
    pub fn predict(&self, row: &[u16]) -> u16 {
        if self.degenerate {
            return row[self.response];
        }
        let mut votes = vec![0u32; self.n_classes];
        for t in &self.trees {
            votes[t.predict(row) as usize] += 1;
        }
        argmax(&votes) as u16
    }

    /// Accuracy of the out-of-bag majority vote, over rows that were out of
    /// bag for at least one tree.
    pub fn oob_accuracy(&self, data: &Dataset) -> f64 {
        if self.degenerate {
            return 1.0;
        }
        let mut votes = vec![0u32; data.n() * self.n_classes];
        for (t, rows) in self.trees.iter().zip(&self.oob) {
            for &r in rows {
                let c = t.predict(data.row(r as usize)) as usize;
                votes[r as usize * self.n_classes + c] += 1;
            }
        }
        let (mut hit, mut seen) = (0usize, 0usize);
        for r in 0..data.n() {
            let v = &votes[r * self.n_classes..(r + 1) * self.n_classes];
            if v.iter().any(|&x| x > 0) {
                seen += 1;
                hit += usize::from(argmax(v) == data.value(r, self.response));
            }
        }
        if seen == 0 {
            f64::NAN
        } else {
            hit as f64 / seen as f64
        }
    }
}

fn argmax(v: &[u32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Grower<'a> {
    data: &'a Dataset,
    response: usize,
    n_classes: usize,
    covariates: Vec<usize>,
    mtry: usize,
    min_leaf: usize,
    max_depth: usize,
}

impl Grower<'_> {
    fn class_counts(&self, rows: &[u32]) -> Vec<u32> {
        let mut c = vec![0u32; self.n_classes];
        for &r in rows {
            c[self.data.value(r as usize, self.response)] += 1;
        }
        c
    }

    fn grow(&self, rows: &mut [u32], depth: usize, rng: &mut ChaCha8Rng, tree: &mut Tree) -> usize {
        let counts = self.class_counts(rows);
        let id = tree.nodes.len();
        let class = argmax(&counts) as u16;
        tree.nodes.push(Node::Leaf { class });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.max_depth || rows.len() < 2 * self.min_leaf {
            return id;
        }
        let Some((var, mask)) = self.best_split(rows, &counts, rng) else {
            return id;
        };
        // partition rows: left block first
        let mut split = 0;
        for i in 0..rows.len() {
            let l = self.data.value(rows[i] as usize, var);
            if (mask >> l) & 1 == 1 {
                rows.swap(i, split);
                split += 1;
            }
        }
        tree.uses[var] = true;
        let (left_rows, right_rows) = rows.split_at_mut(split);
        let lo = self.grow(left_rows, depth + 1, rng, tree);
        let hi = self.grow(right_rows, depth + 1, rng, tree);
        let k = self.data.schema().levels()[var];
        let mut left = vec![0u64; k.div_ceil(64)];
        for l in 0..k.min(64) {
            if (mask >> l) & 1 == 1 {
                left[l >> 6] |= 1 << (l & 63);
            }
        }
        tree.nodes[id] = Node::Split { var, left, lo, hi };
        id
    }

    /// Best Gini split among `mtry` randomly drawn covariates, as a level mask
    /// (bit set = left child). Levels beyond 64 can only go right.
    fn best_split(&self, rows: &[u32], counts: &[u32], rng: &mut ChaCha8Rng) -> Option<(usize, u64)> {
        let n = rows.len() as f64;
        let parent: f64 = counts.iter().map(|&c| (c as f64).powi(2)).sum::<f64>() / n;
        let levels = self.data.schema().levels();
        let candidates = index::sample(rng, self.covariates.len(), self.mtry);
        let mut best: Option<(f64, usize, u64)> = None;
        for ci in candidates.iter() {
            let var = self.covariates[ci];
            let k = levels[var].min(64);
            let nc = self.n_classes;
            let mut table = vec![0u32; k * nc];
            for &r in rows {
                let l = self.data.value(r as usize, var);
                if l < k {
                    table[l * nc + self.data.value(r as usize, self.response)] += 1;
                }
            }
            let masks: Vec<u64> = if k <= EXACT_SPLIT_LEVELS {
                (1..(1u64 << (k - 1))).collect()
            } else {
                (0..k).map(|l| 1u64 << l).collect()
            };
            let mut left = vec![0u32; nc];
            for mask in masks {
                left.iter_mut().for_each(|x| *x = 0);
                for l in 0..k {
                    if (mask >> l) & 1 == 1 {
                        for y in 0..nc {
                            left[y] += table[l * nc + y];
                        }
                    }
                }
                let nl: u32 = left.iter().sum();
                let nr = rows.len() as u32 - nl;
                if (nl as usize) < self.min_leaf || (nr as usize) < self.min_leaf {
                    continue;
                }
                let (mut sl, mut sr) = (0.0, 0.0);
                for y in 0..nc {
                    sl += (left[y] as f64).powi(2);
                    sr += ((counts[y] - left[y]) as f64).powi(2);
                }
                let gain = sl / nl as f64 + sr / nr as f64 - parent;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, var, mask));
                }
            }
        }
        best.map(|(_, v, m)| (v, m))
    }
}

fn tree_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Grows a forest predicting `response` from all other variables.
pub fn fit_forest(data: &Dataset, response: usize, cfg: &ForestConfig) -> Result<Forest> {
    let p = data.schema().len();
    cfg.validate(p)?;
    if response >= p {
        return Err(Error::validation(format!("response {response} out of range")));
    }
    let n = data.n();
    if n < cfg.min_leaf || n == 0 {
        return Err(Error::validation(format!(
            "{n} observations are fewer than min_leaf = {}",
            cfg.min_leaf
        )));
    }
    let n_classes = data.schema().levels()[response];
    let first = data.value(0, response);
    let degenerate = (0..n).all(|r| data.value(r, response) == first);
    if degenerate {
        return Ok(Forest {
            response,
            n_classes,
            trees: Vec::new(),
            oob: Vec::new(),
            degenerate: true,
        });
    }
    let grower = Grower {
        data,
        response,
        n_classes,
        covariates: (0..p).filter(|&v| v != response).collect(),
        mtry: cfg.mtry_for(p)?,
        min_leaf: cfg.min_leaf,
        max_depth: cfg.max_depth.unwrap_or(usize::MAX),
    };
    let s = cfg.sample_size.unwrap_or(n);
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut oob = Vec::with_capacity(cfg.n_trees);
    let mut in_bag = vec![false; n];
    for t in 0..cfg.n_trees {
        let mut rng = tree_rng(cfg.seed, t as u64);
        in_bag.iter_mut().for_each(|b| *b = false);
        let mut rows: Vec<u32> = (0..s)
            .map(|_| {
                let r = rng.random_range(0..n);
                in_bag[r] = true;
                r as u32
            })
            .collect();
        let mut out: Vec<u32> = (0..n as u32).filter(|&r| !in_bag[r as usize]).collect();
        if let Some(cap) = cfg.max_oob {
            if out.len() > cap {
                let mut keep: Vec<u32> = index::sample(&mut rng, out.len(), cap)
                    .iter()
                    .map(|i| out[i])
                    .collect();
                keep.sort_unstable();
                out = keep;
            }
        }
        let mut tree = Tree {
            nodes: Vec::new(),
            uses: vec![false; p],
        };
        grower.grow(&mut rows, 0, &mut rng, &mut tree);
        trees.push(tree);
        oob.push(out);
    }
    Ok(Forest {
        response,
        n_classes,
        trees,
        oob,
        degenerate: false,
    })
}

/// How out-of-bag columns are shuffled; `Identity` leaves them in place and
/// exists so that tests can pin the null case exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shuffle {
    Random,
    Identity,
}

/// Mean over trees of the drop in out-of-bag accuracy after permuting each
/// covariate within the out-of-bag rows. The response's own entry is 0.
pub fn permutation_importance(forest: &Forest, data: &Dataset, seed: u64) -> Vec<f64> {
    permutation_importance_with(forest, data, seed, Shuffle::Random)
}

pub fn permutation_importance_with(forest: &Forest, data: &Dataset, seed: u64, shuffle: Shuffle) -> Vec<f64> {
    let p = data.schema().len();
    let mut imp = vec![0.0; p];
    if forest.degenerate || forest.trees.is_empty() {
        return imp;
    }
    let y = forest.response;
    for (t, (tree, rows)) in forest.trees.iter().zip(&forest.oob).enumerate() {
        if rows.is_empty() {
            continue;
        }
        let mut rng = tree_rng(seed, t as u64);
        let base = rows
            .iter()
            .filter(|&&r| tree.predict(data.row(r as usize)) as usize == data.value(r as usize, y))
            .count();
        for j in (0..p).filter(|&j| j != y) {
            if !tree.uses(j) {
                continue;
            }
            let mut column: Vec<u16> = rows.iter().map(|&r| data.row(r as usize)[j]).collect();
            if shuffle == Shuffle::Random {
                column.shuffle(&mut rng);
            }
            let hits = rows
                .iter()
                .zip(&column)
                .filter(|(&r, &x)| {
                    let row = data.row(r as usize);
                    let pred = tree.predict_by(|v| if v == j { x as usize } else { row[v] as usize });
                    pred as usize == data.value(r as usize, y)
                })
                .count();
            imp[j] += (base as f64 - hits as f64) / rows.len() as f64;
        }
    }
    let nt = forest.trees.len() as f64;
    imp.iter_mut().for_each(|x| *x /= nt);
    imp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::VariableSchema;

    /// Response copies covariate 0 (3 levels); covariates 1..4 are noise.
    fn copy_data(n: usize, seed: u64) -> Dataset {
        let schema = VariableSchema::anonymous(vec![3, 3, 2, 4, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = schema.levels().to_vec();
        let mut codes = Vec::with_capacity(n * levels.len());
        for _ in 0..n {
            let x0 = rng.random_range(0..3u16);
            codes.push(x0);
            for &k in &levels[1..5] {
                codes.push(rng.random_range(0..k as u16));
            }
            codes.push(x0);
        }
        Dataset::from_codes(schema, codes).unwrap()
    }

    fn small_cfg(seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees: 50,
            seed,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn copied_covariate_is_learned() {
        let data = copy_data(2000, 1);
        let f = fit_forest(&data, 5, &small_cfg(3)).unwrap();
        assert!(f.oob_accuracy(&data) > 0.95);
        let imp = permutation_importance(&f, &data, 4);
        let top = (0..5).max_by(|&a, &b| imp[a].total_cmp(&imp[b])).unwrap();
        assert_eq!(top, 0);
        assert!(imp[0] > 0.3);
        assert_eq!(imp[5], 0.0);
    }

    #[test]
    fn stump_predicts_majority() {
        let schema = VariableSchema::binary(2);
        let mut codes = Vec::new();
        for i in 0..100u16 {
            codes.extend([i % 2, u16::from(i % 10 == 0)]);
        }
        let data = Dataset::from_codes(schema, codes).unwrap();
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: Some(0),
            ..ForestConfig::default()
        };
        let f = fit_forest(&data, 1, &cfg).unwrap();
        assert_eq!(f.trees()[0].depth(), 0);
        assert_eq!(f.predict(&[0, 1]), 0);
        assert_eq!(f.predict(&[1, 1]), 0);
    }

    #[test]
    fn seeded_forests_are_identical() {
        let data = copy_data(500, 2);
        let a = fit_forest(&data, 5, &small_cfg(7)).unwrap();
        let b = fit_forest(&data, 5, &small_cfg(7)).unwrap();
        assert_eq!(a, b);
        let probe = copy_data(50, 99);
        for r in 0..probe.n() {
            assert_eq!(a.predict(probe.row(r)), b.predict(probe.row(r)));
        }
        assert_eq!(permutation_importance(&a, &data, 1), permutation_importance(&b, &data, 1));
    }

    #[test]
    fn identity_permutation_gives_zero() {
        let data = copy_data(800, 3);
        let f = fit_forest(&data, 5, &small_cfg(1)).unwrap();
        let imp = permutation_importance_with(&f, &data, 1, Shuffle::Identity);
        assert!(imp.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_response_is_degenerate() {
        let schema = VariableSchema::binary(3);
        let codes: Vec<u16> = (0..60).map(|i| if i % 3 == 2 { 0 } else { (i / 3 % 2) as u16 }).collect();
        let data = Dataset::from_codes(schema, codes).unwrap();
        let f = fit_forest(&data, 2, &small_cfg(0)).unwrap();
        assert!(f.is_degenerate());
        assert_eq!(permutation_importance(&f, &data, 0), vec![0.0; 3]);
    }

    #[test]
    fn config_validation() {
        let data = copy_data(20, 0);
        let bad = ForestConfig {
            mtry: Some(6),
            ..ForestConfig::default()
        };
        assert!(fit_forest(&data, 0, &bad).is_err());
        let bad = ForestConfig {
            n_trees: 0,
            ..ForestConfig::default()
        };
        assert!(fit_forest(&data, 0, &bad).is_err());
        let bad = ForestConfig {
            min_leaf: 21,
            ..ForestConfig::default()
        };
        assert!(fit_forest(&data, 0, &bad).is_err());
    }

    #[test]
    fn many_levels_use_one_vs_rest() {
        // response is level 7 of a 9-level covariate
        let schema = VariableSchema::anonymous(vec![9, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut codes = Vec::new();
        for _ in 0..1500 {
            let x = rng.random_range(0..9u16);
            codes.extend([x, u16::from(x == 7)]);
        }
        let data = Dataset::from_codes(schema, codes).unwrap();
        let f = fit_forest(&data, 1, &small_cfg(2)).unwrap();
        assert!(f.oob_accuracy(&data) > 0.99);
    }

    #[test]
    fn independent_covariate_inside_label_permutation_null() {
        let data = copy_data(1000, 11);
        let cfg = ForestConfig {
            n_trees: 30,
            seed: 5,
            ..ForestConfig::default()
        };
        let target = 2;
        let observed = permutation_importance(&fit_forest(&data, 5, &cfg).unwrap(), &data, 9)[target];
        let p = data.schema().len();
        let mut null = Vec::new();
        for rep in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
            let mut labels: Vec<u16> = (0..data.n()).map(|r| data.row(r)[5]).collect();
            labels.shuffle(&mut rng);
            let mut codes = data.codes().to_vec();
            for (r, &y) in labels.iter().enumerate() {
                codes[r * p + 5] = y;
            }
            let shuffled = Dataset::from_codes(data.schema().clone(), codes).unwrap();
            let f = fit_forest(&shuffled, 5, &cfg).unwrap();
            null.push(permutation_importance(&f, &shuffled, 9)[target]);
        }
        null.sort_by(f64::total_cmp);
        let (lo, hi) = (null[0], null[39]);
        assert!(observed >= lo && observed <= hi, "{observed} not in [{lo}, {hi}]");
    }
}
