//! Model selection on a single contingency table.

pub mod cv;
pub mod group_lasso;
pub mod ipf;
pub mod stepwise;

pub use cv::{cross_validate_lambda, default_grid, CvOptions, CvResult};
pub use group_lasso::{fit_group_lasso, group_lasso_path, lambda_max, GroupLassoFit, GroupLassoOptions};
pub use ipf::{fit_mle, fit_mle_with, log_likelihood, IpfOptions, MleFit};
pub use stepwise::{stepwise_forward, StepwiseFit};
