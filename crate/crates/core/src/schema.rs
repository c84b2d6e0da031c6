//! Variable schemas, observation storage, cell indexing and collapsing.
//!
//! Cells are linearized in mixed radix with the last schema variable varying
//! fastest. Observations are the primary representation of a dataset; dense
//! tables are only ever built for small margins.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::capacity::{self, DEFAULT_MAX_CELLS};
use crate::error::{Error, Result};

/// Names and level counts of a set of categorical variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSchema {
    names: Vec<String>,
    levels: Vec<usize>,
}

impl VariableSchema {
    pub fn new(names: Vec<String>, levels: Vec<usize>) -> Result<Self> {
        if names.len() != levels.len() {
            return Err(Error::validation(format!(
                "{} names but {} level counts",
                names.len(),
                levels.len()
            )));
        }
        let mut seen = HashSet::new();
        for (name, &k) in names.iter().zip(&levels) {
            if !seen.insert(name.as_str()) {
                return Err(Error::validation(format!("duplicate variable name {name:?}")));
            }
            if k < 2 {
                return Err(Error::validation(format!(
                    "variable {name:?} has {k} levels, need at least 2"
                )));
            }
            if k > u16::MAX as usize {
                return Err(Error::validation(format!("variable {name:?} has too many levels")));
            }
        }
        Ok(Self { names, levels })
    }

    /// Schema with variables named `X1..Xp`.
    pub fn anonymous(levels: Vec<usize>) -> Result<Self> {
        let names = (1..=levels.len()).map(|i| format!("X{i}")).collect();
        Self::new(names, levels)
    }

    /// `p` binary variables named `X1..Xp`.
    pub fn binary(p: usize) -> Self {
        Self::anonymous(vec![2; p]).expect("binary schema is valid")
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Number of cells, if it fits in `limit`.
    pub fn num_cells(&self, limit: usize) -> Result<usize> {
        capacity::cells_for(&self.levels, limit, "contingency table")
    }

    /// Restriction to `vars` (sorted, distinct, in range).
    pub fn sub_schema(&self, vars: &[usize]) -> Result<Self> {
        check_subset(vars, self.len())?;
        Ok(Self {
            names: vars.iter().map(|&v| self.names[v].clone()).collect(),
            levels: vars.iter().map(|&v| self.levels[v]).collect(),
        })
    }

    pub fn check_cell(&self, cell: &[usize]) -> Result<()> {
        if cell.len() != self.len() {
            return Err(Error::validation(format!(
                "cell has {} coordinates, schema has {} variables",
                cell.len(),
                self.len()
            )));
        }
        for (v, (&x, &k)) in cell.iter().zip(&self.levels).enumerate() {
            if x >= k {
                return Err(Error::validation(format!(
                    "level {x} out of range for variable {:?} with {k} levels",
                    self.names[v]
                )));
            }
        }
        Ok(())
    }
}

/// Validates that `vars` is strictly increasing and below `p`.
pub(crate) fn check_subset(vars: &[usize], p: usize) -> Result<()> {
    for w in vars.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::validation(format!(
                "variable subset {vars:?} must be strictly increasing"
            )));
        }
    }
    if let Some(&last) = vars.last() {
        if last >= p {
            return Err(Error::validation(format!(
                "variable {last} not in a schema of {p} variables"
            )));
        }
    }
    Ok(())
}

/// Mixed-radix index of `cell`, last variable fastest.
pub fn cell_index(schema: &VariableSchema, cell: &[usize]) -> Result<usize> {
    schema.check_cell(cell)?;
    let mut idx: usize = 0;
    for (&x, &k) in cell.iter().zip(schema.levels()) {
        idx = idx
            .checked_mul(k)
            .and_then(|i| i.checked_add(x))
            .ok_or_else(|| Error::Capacity {
                what: "cell index".into(),
                cells: u128::MAX,
                limit: usize::MAX as u128,
            })?;
    }
    Ok(idx)
}

/// Inverse of [`cell_index`].
pub fn cell_of_index(schema: &VariableSchema, index: usize) -> Result<Vec<usize>> {
    let mut cell = vec![0; schema.len()];
    let mut rest = index;
    for (v, &k) in schema.levels().iter().enumerate().rev() {
        cell[v] = rest % k;
        rest /= k;
    }
    if rest != 0 {
        return Err(Error::validation(format!("cell index {index} out of range")));
    }
    Ok(cell)
}

/// Coordinates of `cell` restricted to `subset`, in schema order.
pub fn marginal_cell(schema: &VariableSchema, cell: &[usize], subset: &[usize]) -> Result<Vec<usize>> {
    schema.check_cell(cell)?;
    check_subset(subset, schema.len())?;
    Ok(subset.iter().map(|&v| cell[v]).collect())
}

/// Iterates over all cells of `levels` in canonical order.
pub(crate) fn for_each_cell(levels: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let m: usize = levels.iter().product();
    let mut cell = vec![0usize; levels.len()];
    for idx in 0..m {
        f(idx, &cell);
        for v in (0..levels.len()).rev() {
            cell[v] += 1;
            if cell[v] < levels[v] {
                break;
            }
            cell[v] = 0;
        }
    }
}

/// Raw categorical observations under a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: VariableSchema,
    // row-major, one u16 level code per variable
    data: Vec<u16>,
    n: usize,
}

impl Dataset {
    pub fn new(schema: VariableSchema, rows: &[Vec<usize>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * schema.len());
        for (r, row) in rows.iter().enumerate() {
            schema
                .check_cell(row)
                .map_err(|e| Error::validation(format!("row {r}: {e}")))?;
            data.extend(row.iter().map(|&x| x as u16));
        }
        Ok(Self {
            schema,
            data,
            n: rows.len(),
        })
    }

    /// Builds a dataset from row-major codes; validates every entry.
    pub fn from_codes(schema: VariableSchema, data: Vec<u16>) -> Result<Self> {
        let p = schema.len();
        if p == 0 {
            return Err(Error::validation("schema has no variables"));
        }
        if data.len() % p != 0 {
            return Err(Error::validation("code buffer is not a whole number of rows"));
        }
        for (i, &x) in data.iter().enumerate() {
            if x as usize >= schema.levels()[i % p] {
                return Err(Error::validation(format!(
                    "row {}: level {x} out of range for variable {:?}",
                    i / p,
                    schema.names()[i % p]
                )));
            }
        }
        let n = data.len() / p;
        Ok(Self { schema, data, n })
    }

    pub(crate) fn from_codes_unchecked(schema: VariableSchema, data: Vec<u16>) -> Self {
        let n = data.len() / schema.len().max(1);
        Self { schema, data, n }
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, r: usize) -> &[u16] {
        let p = self.schema.len();
        &self.data[r * p..(r + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u16]> {
        self.data.chunks_exact(self.schema.len().max(1))
    }

    #[inline]
    pub fn value(&self, r: usize, v: usize) -> usize {
        self.data[r * self.schema.len() + v] as usize
    }

    pub fn codes(&self) -> &[u16] {
        &self.data
    }

    /// Same observations in a different row order.
    pub fn permute_rows(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n {
            return Err(Error::validation("row permutation has wrong length"));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &r in order {
            data.extend_from_slice(self.row(r));
        }
        Ok(Self::from_codes_unchecked(self.schema.clone(), data))
    }
}

/// Dense cell counts over a small margin of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    schema: VariableSchema,
    /// Positions of the table's variables in the parent schema.
    vars: Vec<usize>,
    counts: Vec<u64>,
}

impl ContingencyTable {
    pub fn new(schema: VariableSchema, vars: Vec<usize>, counts: Vec<u64>) -> Result<Self> {
        let m = schema.num_cells(DEFAULT_MAX_CELLS)?;
        if counts.len() != m {
            return Err(Error::validation(format!(
                "table has {} counts but {m} cells",
                counts.len()
            )));
        }
        if vars.len() != schema.len() {
            return Err(Error::validation("variable map length differs from schema"));
        }
        capacity::note_dense(m);
        Ok(Self {
            schema,
            vars,
            counts,
        })
    }

    /// Table over `schema` whose variables are the schema itself.
    pub fn from_counts(schema: VariableSchema, counts: Vec<u64>) -> Result<Self> {
        let vars = (0..schema.len()).collect();
        Self::new(schema, vars, counts)
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn vars(&self) -> &[usize] {
        &self.vars
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Relative frequencies `n_i / n`.
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Sums out every variable not in `onto` (given as parent-schema indices).
    pub fn collapse(&self, onto: &[usize]) -> Result<ContingencyTable> {
        let local: Vec<usize> = onto
            .iter()
            .map(|g| {
                self.vars.iter().position(|v| v == g).ok_or_else(|| {
                    Error::validation(format!("variable {g} is not part of this table"))
                })
            })
            .collect::<Result<_>>()?;
        check_subset(&local, self.schema.len())?;
        let sub = self.schema.sub_schema(&local)?;
        let mut counts = vec![0u64; sub.levels().iter().product()];
        let sub_levels = sub.levels().to_vec();
        let counts_ref = &self.counts;
        for_each_cell(self.schema.levels(), |idx, cell| {
            let mut j = 0;
            for (&v, &k) in local.iter().zip(&sub_levels) {
                j = j * k + cell[v];
            }
            counts[j] += counts_ref[idx];
        });
        ContingencyTable::new(sub, onto.to_vec(), counts)
    }
}

/// Counts of the dataset's observations on the margin `subset`.
pub fn tabulate(data: &Dataset, subset: &[usize]) -> Result<ContingencyTable> {
    tabulate_with_limit(data, subset, DEFAULT_MAX_CELLS)
}

pub fn tabulate_with_limit(data: &Dataset, subset: &[usize], max_cells: usize) -> Result<ContingencyTable> {
    if subset.is_empty() {
        return Err(Error::validation("cannot tabulate the empty margin"));
    }
    let sub = data.schema().sub_schema(subset)?;
    let m = sub.num_cells(max_cells)?;
    let mut counts = vec![0u64; m];
    for row in data.rows() {
        let mut j = 0usize;
        for (&v, &k) in subset.iter().zip(sub.levels()) {
            j = j * k + row[v] as usize;
        }
        counts[j] += 1;
    }
    ContingencyTable::new(sub, subset.to_vec(), counts)
}

/// Multinomial draw of `n` trials over `prob`, deterministic given `seed`.
pub fn sample_multinomial(prob: &[f64], n: u64, seed: u64) -> Result<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_multinomial_with(prob, n, &mut rng)
}

pub(crate) fn sample_multinomial_with<R: Rng>(prob: &[f64], n: u64, rng: &mut R) -> Result<Vec<u64>> {
    if prob.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::validation("probabilities must be finite and nonnegative"));
    }
    let total: f64 = prob.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::validation(format!("probabilities sum to {total}, not 1")));
    }
    // sequential conditional binomials
    let mut out = vec![0u64; prob.len()];
    let mut remaining = n;
    let mut mass_left = 1.0f64;
    for (i, &p) in prob.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == prob.len() {
            out[i] = remaining;
            break;
        }
        let q = if mass_left > 0.0 { (p / mass_left).clamp(0.0, 1.0) } else { 1.0 };
        let draw = if q >= 1.0 {
            remaining
        } else if q <= 0.0 {
            0
        } else {
            Binomial::new(remaining, q)
                .map_err(|e| Error::validation(e.to_string()))?
                .sample(rng)
        };
        out[i] = draw;
        remaining -= draw;
        mass_left -= p;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema(levels: &[usize]) -> VariableSchema {
        VariableSchema::anonymous(levels.to_vec()).unwrap()
    }

    #[test]
    fn cell_index_examples() {
        assert_eq!(cell_index(&schema(&[2, 2]), &[0, 1]).unwrap(), 1);
        assert_eq!(cell_index(&schema(&[2, 2]), &[1, 1]).unwrap(), 3);
        assert_eq!(cell_index(&schema(&[2, 3]), &[1, 2]).unwrap(), 5);
        assert!(matches!(
            cell_index(&schema(&[2, 3]), &[2, 0]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn cell_index_round_trip_exhaustive() {
        for levels in [vec![2], vec![3, 2], vec![2, 3, 4], vec![2, 2, 2, 2, 2], vec![4, 3, 2, 3, 2]] {
            let s = schema(&levels);
            let m: usize = levels.iter().product();
            for idx in 0..m {
                let cell = cell_of_index(&s, idx).unwrap();
                assert_eq!(cell_index(&s, &cell).unwrap(), idx);
            }
            assert!(cell_of_index(&s, m).is_err());
        }
    }

    #[test]
    fn marginal_cell_examples() {
        let s = schema(&[2, 2]);
        // second variable has index 1
        assert_eq!(marginal_cell(&s, &[0, 1], &[1]).unwrap(), vec![1]);
        assert_eq!(marginal_cell(&s, &[0, 1], &[0, 1]).unwrap(), vec![0, 1]);
        let empty = marginal_cell(&s, &[0, 1], &[]).unwrap();
        assert!(empty.is_empty());
        assert_eq!(cell_index(&s.sub_schema(&[]).unwrap(), &empty).unwrap(), 0);
        assert!(marginal_cell(&s, &[0, 1], &[2]).is_err());
    }

    #[test]
    fn tabulate_examples() {
        let s = schema(&[2, 2]);
        let d = Dataset::new(s, &[vec![0, 0], vec![0, 1], vec![0, 1]]).unwrap();
        assert_eq!(tabulate(&d, &[1]).unwrap().counts(), &[1, 2]);
        assert_eq!(tabulate(&d, &[0, 1]).unwrap().counts(), &[1, 2, 0, 0]);
        assert!(tabulate(&d, &[]).is_err());
        assert!(matches!(
            tabulate_with_limit(&d, &[0, 1], 3),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn multinomial_examples() {
        assert_eq!(sample_multinomial(&[0.5, 0.5], 0, 1).unwrap(), vec![0, 0]);
        assert_eq!(sample_multinomial(&[1.0, 0.0, 0.0, 0.0], 7, 3).unwrap(), vec![7, 0, 0, 0]);
        assert!(sample_multinomial(&[0.5, 0.6], 3, 1).is_err());
        assert_eq!(
            sample_multinomial(&[0.2, 0.3, 0.5], 1000, 11).unwrap(),
            sample_multinomial(&[0.2, 0.3, 0.5], 1000, 11).unwrap()
        );
    }

    #[test]
    fn multinomial_uniform_goodness_of_fit() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let n = 100_000u64;
        let counts = sample_multinomial(&[0.125; 8], n, 2024).unwrap();
        assert_eq!(counts.iter().sum::<u64>(), n);
        let e = n as f64 / 8.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let crit = ChiSquared::new(7.0).unwrap().inverse_cdf(0.999);
        assert!(stat < crit, "chi-square {stat} >= {crit}");
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        prop::collection::vec(2usize..4, 2..5).prop_flat_map(|levels| {
            let p = levels.len();
            let row = levels.iter().map(|&k| 0..k).collect::<Vec<_>>();
            prop::collection::vec(row, 0..60).prop_map(move |rows| {
                let s = VariableSchema::anonymous(levels.clone()).unwrap();
                assert_eq!(s.len(), p);
                Dataset::new(s, &rows).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn tabulate_commutes_with_collapse(d in arb_dataset(), mask_b in 1u32..32, mask_a in 1u32..32) {
            let p = d.schema().len();
            let b: Vec<usize> = (0..p).filter(|v| mask_b >> v & 1 == 1).collect();
            let a: Vec<usize> = b.iter().copied().filter(|v| mask_a >> v & 1 == 1).collect();
            prop_assume!(!b.is_empty() && !a.is_empty());
            let tb = tabulate(&d, &b).unwrap();
            let ta = tabulate(&d, &a).unwrap();
            let collapsed = tb.collapse(&a).unwrap();
            prop_assert_eq!(collapsed.counts(), ta.counts());
            prop_assert_eq!(collapsed.total(), d.n() as u64);
        }
    }
}
