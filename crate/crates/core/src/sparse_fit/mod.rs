//! Sparse solvers: marginal-correlation screening, Lasso by coordinate
//! descent, SPAM backfitting with functional soft-thresholding, and BIC
//! selection along descending penalty grids.

mod lasso;
mod path;
mod screen;
mod spam;

pub use lasso::{kkt_residual, lasso_cd, LassoFit, LassoOptions, LassoProblem};
pub use path::{
    bic, geometric_grid, lasso_lambda_max, lasso_path, make_lasso_grid, make_spam_grid, select_bic,
    spam_lambda_max, spam_path, ModelPath, PathFit, DEFAULT_GRID_LEN, DEFAULT_GRID_RATIO,
};
pub use screen::{screen_by_correlation, ScreenResult, Standardization};
pub use spam::{soft_threshold_vector, spam_backfit, SpamComponent, SpamFit, SpamOptions, SpamSolver};

/// Scalar soft-threshold `sign(z)·max(|z| − λ, 0)`.
pub fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}
