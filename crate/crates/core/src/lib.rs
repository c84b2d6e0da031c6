//! Sparse hierarchical log-linear models and discrete graphical models for
//! large contingency tables, estimated by recursive clique decomposition.
//!
//! The pipeline screens variable pairs with node-wise random forests
//! ([`importance`]), thins and triangulates the complete graph until cliques
//! are small enough to tabulate ([`decompose`]), selects a log-linear model on
//! each collapsed clique and separator table ([`select`]), and stitches the
//! local fits back together with the decomposable factorization
//! ([`combine`]). Normalization, marginals and sampling run on a junction
//! tree ([`junction`]).

pub mod capacity;
pub mod combine;
pub mod decompose;
pub mod design;
pub mod error;
pub mod eval;
pub mod forest;
pub mod graph;
pub mod importance;
pub mod io;
pub mod junction;
pub mod numeric;
pub mod pipeline;
pub mod schema;
pub mod select;
pub mod simulate;

pub use error::{Error, Result};
