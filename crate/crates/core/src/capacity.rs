//! Bookkeeping for dense allocations whose size is exponential in the number
//! of variables (contingency tables, clique potentials, design bases).

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

/// Default upper bound on the number of cells of any dense table.
pub const DEFAULT_MAX_CELLS: usize = 1 << 24;

static PEAK_CELLS: AtomicUsize = AtomicUsize::new(0);

/// Product of level counts, or a capacity error if it exceeds `limit`.
pub fn cells_for(levels: &[usize], limit: usize, what: &str) -> Result<usize> {
    let mut m: u128 = 1;
    for &k in levels {
        m = m.saturating_mul(k as u128);
    }
    if m > limit as u128 {
        return Err(Error::Capacity {
            what: what.to_string(),
            cells: m,
            limit: limit as u128,
        });
    }
    Ok(m as usize)
}

/// Record that a dense table of `cells` entries was materialized.
pub fn note_dense(cells: usize) {
    PEAK_CELLS.fetch_max(cells, Ordering::Relaxed);
}

/// Largest dense table materialized since the last [`reset_peak`].
pub fn peak_cells() -> usize {
    PEAK_CELLS.load(Ordering::Relaxed)
}

pub fn reset_peak() {
    PEAK_CELLS.store(0, Ordering::Relaxed);
}
