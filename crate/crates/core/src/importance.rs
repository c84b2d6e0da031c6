//! Node-wise importance screening: one forest per variable, within-row ranks
//! and their symmetrized maximum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{fit_forest, permutation_importance, ForestConfig};
use crate::schema::Dataset;

/// Importance `m[i][j]` of covariate `j` for response `i`, the row ranks `r`
/// and the symmetrized ranks `rtilde`. Diagonals hold NaN, 0 and +inf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrices {
    pub m: Vec<Vec<f64>>,
    pub r: Vec<Vec<usize>>,
    pub rtilde: Vec<Vec<f64>>,
}

impl ImportanceMatrices {
    /// Ranks and symmetrizes a square importance matrix (diagonal ignored).
    pub fn from_importance(m: Vec<Vec<f64>>) -> Result<Self> {
        let p = m.len();
        if p < 2 || m.iter().any(|row| row.len() != p) {
            return Err(Error::validation("importance matrix must be square with p >= 2"));
        }
        let r: Vec<Vec<usize>> = m.iter().enumerate().map(|(i, row)| row_ranks(row, i)).collect();
        let rtilde = symmetrize(&r);
        Ok(Self { m, r, rtilde })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Ranks `1..=p-1` of the off-diagonal entries of a row, smallest value first;
/// ties go to the lower covariate index first. The diagonal gets 0.
pub fn row_ranks(row: &[f64], diag: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| j != diag).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; row.len()];
    for (k, j) in order.into_iter().enumerate() {
        ranks[j] = k + 1;
    }
    ranks
}

/// `max(R[i][j], R[j][i])` off the diagonal, `+inf` on it.
pub fn symmetrize(r: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let p = r.len();
    (0..p)
        .map(|i| {
            (0..p)
                .map(|j| {
                    if i == j {
                        f64::INFINITY
                    } else {
                        r[i][j].max(r[j][i]) as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Runs the `p` node-wise forests (in parallel on the current rayon pool) and
/// builds the importance matrices. Response `i` uses seed `cfg.seed + i`.
pub fn importance_matrix(data: &Dataset, cfg: &ForestConfig) -> Result<ImportanceMatrices> {
    let p = data.schema().len();
    cfg.validate(p)?;
    let rows: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|i| {
            let local = ForestConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            let forest = fit_forest(data, i, &local)?;
            let mut row = permutation_importance(&forest, data, local.seed);
            row[i] = f64::NAN;
            log::debug!("importance row {i} done");
            Ok(row)
        })
        .collect::<Result<_>>()?;
    ImportanceMatrices::from_importance(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::VariableSchema;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const NAN: f64 = f64::NAN;

    #[test]
    fn hand_ranked_example() {
        let m = vec![vec![NAN, 3.0, 1.0], vec![2.0, NAN, 5.0], vec![4.0, 0.0, NAN]];
        let im = ImportanceMatrices::from_importance(m).unwrap();
        assert_eq!(im.r, vec![vec![0, 2, 1], vec![1, 0, 2], vec![2, 1, 0]]);
        assert_eq!(im.rtilde[0][1], 2.0);
        assert_eq!(im.rtilde[0][2], 2.0);
        assert_eq!(im.rtilde[1][2], 2.0);
        assert!(im.rtilde[1][1].is_infinite());
    }

    #[test]
    fn two_variables() {
        let im = ImportanceMatrices::from_importance(vec![vec![NAN, -0.3], vec![0.1, NAN]]).unwrap();
        assert_eq!(im.rtilde[0][1], 1.0);
        assert_eq!(im.rtilde[1][0], 1.0);
    }

    #[test]
    fn ties_follow_index() {
        assert_eq!(row_ranks(&[0.0, NAN, 0.0, 0.0], 1), vec![1, 0, 2, 3]);
    }

    fn chain_data(n: usize, seed: u64) -> Dataset {
        // binary Markov chain with strong persistence
        let p = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codes = Vec::with_capacity(n * p);
        for _ in 0..n {
            let mut x = rng.random_range(0..2u16);
            for _ in 0..p {
                codes.push(x);
                if rng.random::<f64>() < 0.25 {
                    x = 1 - x;
                }
            }
        }
        Dataset::from_codes(VariableSchema::binary(p), codes).unwrap()
    }

    fn fast_cfg(seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees: 40,
            sample_size: Some(2000),
            max_oob: Some(1000),
            seed,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn symmetric_and_deterministic_on_random_data() {
        let data = chain_data(500, 3);
        let a = importance_matrix(&data, &fast_cfg(1)).unwrap();
        let b = importance_matrix(&data, &fast_cfg(1)).unwrap();
        assert_eq!(a.r, b.r);
        assert_eq!(a.rtilde, b.rtilde);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(a.rtilde[i][j], a.rtilde[j][i]);
                if i != j {
                    assert!((1.0..=5.0).contains(&a.rtilde[i][j]));
                }
            }
        }
    }

    #[test]
    fn chain_edges_rank_on_top() {
        let mut hits = 0;
        for rep in 0..20u64 {
            let data = chain_data(10_000, 100 + rep);
            let im = importance_matrix(&data, &fast_cfg(rep)).unwrap();
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for i in 0..6 {
                for j in i + 1..6 {
                    pairs.push((im.rtilde[i][j], i, j));
                }
            }
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
            // no non-edge may outscore a chain edge; ties are allowed since
            // the max of two integer ranks often puts a 2-step pair level
            // with a middle edge
            let edge_min = pairs.iter().filter(|t| t.2 == t.1 + 1).map(|t| t.0).fold(f64::INFINITY, f64::min);
            let gap_max = pairs.iter().filter(|t| t.2 != t.1 + 1).map(|t| t.0).fold(0.0, f64::max);
            hits += usize::from(edge_min >= gap_max);
        }
        assert!(hits >= 18, "{hits}/20");
    }

    proptest! {
        #[test]
        fn ranks_ignore_monotone_transforms(row in proptest::collection::vec(-5.0f64..5.0, 5), diag in 0usize..5) {
            let transformed: Vec<f64> = row.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(row_ranks(&row, diag), row_ranks(&transformed, diag));
        }

        #[test]
        fn rtilde_symmetric_with_range(rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 5), 5)) {
            let im = ImportanceMatrices::from_importance(rows).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert_eq!(im.rtilde[i][j], im.rtilde[j][i]);
                    if i != j {
                        prop_assert!(im.rtilde[i][j] >= 1.0 && im.rtilde[i][j] <= 4.0);
                    }
                }
            }
        }
    }
}
