//! Graph-recovery ROC curves and Monte-Carlo cross-entropy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::LogLinearModel;
use crate::error::{Error, Result};
use crate::graph::{CliqueDecomposition, Graph};
use crate::junction::JunctionTree;
use crate::numeric::KahanSum;
use crate::schema::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Edges with strength >= threshold are selected.
    #[serde(with = "crate::numeric::nonfinite")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    pub true_edges: usize,
    pub true_gaps: usize,
    /// Edges of the model's interaction graph (all nonzero blocks).
    pub estimated_edges: usize,
    #[serde(with = "crate::numeric::nonfinite::option")]
    pub kl: Option<f64>,
}

/// Strength of each pair: the largest block norm among nonzero terms that
/// contain both endpoints. Pairs without such a term are left out.
pub fn edge_strengths(model: &LogLinearModel) -> Vec<((usize, usize), f64)> {
    let p = model.schema().len();
    let mut s = vec![0.0f64; p * p];
    for t in model.active_terms() {
        let norm = model.block_norm(t);
        let v = t.vars();
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                let k = v[i] * p + v[j];
                s[k] = s[k].max(norm);
            }
        }
    }
    let mut out = Vec::new();
    for u in 0..p {
        for v in u + 1..p {
            if s[u * p + v] > 0.0 {
                out.push(((u, v), s[u * p + v]));
            }
        }
    }
    out
}

/// Sweeps the threshold down through the distinct edge strengths. The curve
/// starts at (0, 0); equal strengths enter together.
pub fn roc_sweep(model: &LogLinearModel, truth: &Graph) -> Result<EvaluationReport> {
    roc_from_strengths(model.schema().len(), edge_strengths(model), truth)
}

/// ROC of a fixed estimated graph: a single step from (0, 0).
pub fn roc_for_graph(estimate: &Graph, truth: &Graph) -> Result<EvaluationReport> {
    let strengths = estimate.edges().into_iter().map(|e| (e, 1.0)).collect();
    roc_from_strengths(estimate.capacity(), strengths, truth)
}

fn roc_from_strengths(p: usize, mut strengths: Vec<((usize, usize), f64)>, truth: &Graph) -> Result<EvaluationReport> {
    if truth.capacity() != p {
        return Err(Error::validation(format!(
            "true graph has {} vertices, estimate has {p} variables",
            truth.capacity()
        )));
    }
    let true_edges = truth.num_edges();
    let true_gaps = p * p.saturating_sub(1) / 2 - true_edges;
    let rate = |k: usize, of: usize| if of == 0 { 0.0 } else { k as f64 / of as f64 };
    let estimated_edges = strengths.len();
    strengths.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut roc = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
        edges: 0,
    }];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < strengths.len() {
        let level = strengths[i].1;
        while i < strengths.len() && strengths[i].1 == level {
            let (u, v) = strengths[i].0;
            if truth.has_edge(u, v) {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push(RocPoint {
            threshold: level,
            fpr: rate(fp, true_gaps),
            tpr: rate(tp, true_edges),
            edges: i,
        });
    }
    Ok(EvaluationReport {
        auc: auc(&roc),
        roc,
        true_edges,
        true_gaps,
        estimated_edges,
        kl: None,
    })
}

/// Trapezoidal area under the curve, closed by a straight line to (1, 1).
pub fn auc(roc: &[RocPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = roc.iter().map(|r| (r.fpr, r.tpr)).collect();
    if pts.first() != Some(&(0.0, 0.0)) {
        pts.insert(0, (0.0, 0.0));
    }
    if pts.last() != Some(&(1.0, 1.0)) {
        pts.push((1.0, 1.0));
    }
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Smallest false-positive rate at which the (closed) curve reaches `tpr`,
/// interpolating linearly between points.
pub fn fpr_at_tpr(roc: &[RocPoint], tpr: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = roc.iter().map(|r| (r.fpr, r.tpr)).collect();
    pts.push((1.0, 1.0));
    if tpr <= 0.0 {
        return 0.0;
    }
    let mut prev = (0.0, 0.0);
    for &(f, t) in &pts {
        if t >= tpr {
            return prev.0 + (f - prev.0) * (tpr - prev.1) / (t - prev.1);
        }
        prev = (f, t);
    }
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    /// `-(1/N) sum log p(x)` over the reference sample; infinite if some
    /// observation has probability zero.
    #[serde(with = "crate::numeric::nonfinite")]
    pub value: f64,
    pub observations: usize,
    /// Up to ten distinct observed cells with zero model probability.
    pub zero_cells: Vec<Vec<usize>>,
}

const KL_CHUNK: usize = 4096;

/// Monte-Carlo cross-entropy of the model on a reference sample. Chunks are
/// fixed-size and summed in order, so the value does not depend on the
/// thread count.
pub fn empirical_kl(reference: &Dataset, model: &JunctionTree) -> Result<KlEstimate> {
    if reference.schema() != model.schema() {
        return Err(Error::validation("reference sample and model have different schemas"));
    }
    let n = reference.n();
    if n == 0 {
        return Err(Error::validation("reference sample is empty"));
    }
    let p = reference.schema().len();
    let codes = reference.codes();
    let chunks: Vec<(f64, Vec<Vec<usize>>)> = (0..n.div_ceil(KL_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut sum = KahanSum::default();
            let mut zeros = Vec::new();
            for r in c * KL_CHUNK..((c + 1) * KL_CHUNK).min(n) {
                let row = &codes[r * p..(r + 1) * p];
                let lp = model.log_prob_codes(row);
                if lp == f64::NEG_INFINITY {
                    let cell: Vec<usize> = row.iter().map(|&x| x as usize).collect();
                    if zeros.len() < 10 && !zeros.contains(&cell) {
                        zeros.push(cell);
                    }
                } else {
                    sum.add(lp);
                }
            }
            (sum.value(), zeros)
        })
        .collect();
    let mut total = KahanSum::default();
    let mut zero_cells: Vec<Vec<usize>> = Vec::new();
    for (s, z) in chunks {
        total.add(s);
        for cell in z {
            if zero_cells.len() < 10 && !zero_cells.contains(&cell) {
                zero_cells.push(cell);
            }
        }
    }
    let value = if zero_cells.is_empty() {
        -total.value() / n as f64
    } else {
        log::warn!("model gives probability zero to observed cells {zero_cells:?}");
        f64::INFINITY
    };
    Ok(KlEstimate {
        value,
        observations: n,
        zero_cells,
    })
}

/// Convenience wrapper calibrating the model on `decomp` first.
pub fn empirical_kl_model(reference: &Dataset, model: &LogLinearModel, decomp: &CliqueDecomposition) -> Result<KlEstimate> {
    empirical_kl(reference, &JunctionTree::calibrate(model, decomp)?)
}
