//! K-fold choice of the group-lasso penalty on a single table.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::group_lasso::{lambda_max, path_probabilities, GroupLassoOptions};
use crate::error::{Error, Result};
use crate::schema::ContingencyTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    pub solver: GroupLassoOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 10,
            seed: 0,
            solver: GroupLassoOptions {
                tol: 1e-6,
                ..GroupLassoOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    pub grid: Vec<f64>,
    /// Mean held-out log-likelihood per grid point (same order as `grid`).
    pub scores: Vec<f64>,
}

/// `points` log-spaced penalties from `lambda_max` down to `lambda_max * ratio`.
pub fn default_grid(table: &ContingencyTable, points: usize, ratio: f64) -> Result<Vec<f64>> {
    if points == 0 || !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::validation("grid needs at least one point and ratio in (0, 1]"));
    }
    let top = lambda_max(table)?;
    if top == 0.0 {
        return Ok(vec![0.0]);
    }
    if points == 1 {
        return Ok(vec![top]);
    }
    let step = ratio.ln() / (points - 1) as f64;
    Ok((0..points).map(|i| top * (step * i as f64).exp()).collect())
}

/// Observations are reconstructed from the cell counts in cell order, shuffled
/// with `seed` and dealt round-robin into folds, so the result depends only on
/// the table and the seed. Ties in score go to the larger penalty.
pub fn cross_validate_lambda(table: &ContingencyTable, grid: &[f64], opts: &CvOptions) -> Result<CvResult> {
    let k = opts.folds;
    if k < 2 {
        return Err(Error::validation("cross-validation needs at least 2 folds"));
    }
    if grid.is_empty() || grid.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::validation("lambda grid must be nonempty, finite and >= 0"));
    }
    let n = table.total() as usize;
    if n < k {
        return Err(Error::validation(format!("{n} observations cannot fill {k} folds")));
    }
    let mut obs: Vec<usize> = Vec::with_capacity(n);
    for (i, &c) in table.counts().iter().enumerate() {
        obs.extend(std::iter::repeat_n(i, c as usize));
    }
    obs.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let mut test = vec![vec![0u64; table.len()]; k];
    for (pos, &cell) in obs.iter().enumerate() {
        test[pos % k][cell] += 1;
    }

    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| grid[i]).collect();

    let mut scores = vec![0.0; grid.len()];
    for held in &test {
        let train: Vec<u64> = table.counts().iter().zip(held).map(|(a, b)| a - b).collect();
        let train = ContingencyTable::new(table.schema().clone(), table.vars().to_vec(), train)?;
        let probs = path_probabilities(&train, &sorted, &opts.solver)?;
        for (&g, p) in order.iter().zip(&probs) {
            let ll: f64 = held
                .iter()
                .zip(p)
                .filter(|(&c, _)| c > 0)
                .map(|(&c, &q)| c as f64 * q.ln())
                .sum();
            scores[g] += ll / k as f64;
        }
    }

    let mut best = order[0];
    for &g in &order[1..] {
        if scores[g] > scores[best] {
            best = g;
        }
    }
    Ok(CvResult {
        lambda: grid[best],
        grid: grid.to_vec(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{sample_multinomial, VariableSchema};

    #[test]
    fn grid_is_log_spaced_from_lambda_max() {
        let table = ContingencyTable::from_counts(VariableSchema::binary(2), vec![40, 10, 15, 35]).unwrap();
        let g = default_grid(&table, 30, 1e-3).unwrap();
        assert_eq!(g.len(), 30);
        assert_eq!(g[0], lambda_max(&table).unwrap());
        assert!((g[29] / g[0] - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn independent_table_prefers_heavy_penalty_on_interaction() {
        let schema = VariableSchema::binary(3);
        let probs = vec![0.125; 8];
        let counts = sample_multinomial(&probs, 5000, 3).unwrap();
        let table = ContingencyTable::from_counts(schema, counts).unwrap();
        let grid = default_grid(&table, 15, 1e-3).unwrap();
        let cv = cross_validate_lambda(&table, &grid, &CvOptions::default()).unwrap();
        assert!(cv.lambda >= grid[7], "{cv:?}");
    }

    #[test]
    fn strong_signal_prefers_small_penalty() {
        let table = ContingencyTable::from_counts(VariableSchema::binary(2), vec![4000, 500, 600, 3900]).unwrap();
        let grid = default_grid(&table, 20, 1e-3).unwrap();
        let cv = cross_validate_lambda(&table, &grid, &CvOptions::default()).unwrap();
        assert!(cv.lambda < grid[0]);
        let again = cross_validate_lambda(&table, &grid, &CvOptions::default()).unwrap();
        assert_eq!(cv, again);
    }

    #[test]
    fn rejects_bad_inputs() {
        let table = ContingencyTable::from_counts(VariableSchema::binary(1), vec![1, 1]).unwrap();
        assert!(cross_validate_lambda(&table, &[0.1], &CvOptions::default()).is_err());
        let table = ContingencyTable::from_counts(VariableSchema::binary(1), vec![10, 10]).unwrap();
        assert!(cross_validate_lambda(&table, &[], &CvOptions::default()).is_err());
        assert!(cross_validate_lambda(&table, &[-1.0], &CvOptions::default()).is_err());
    }
}
