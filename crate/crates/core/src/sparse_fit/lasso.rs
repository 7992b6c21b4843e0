use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::soft_threshold;
use crate::error::{invalid_arg, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    /// Stop once the KKT residual is at most `kkt_tol · n`.
    pub kkt_tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-9,
            max_sweeps: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub active_count: usize,
    pub rss: f64,
    pub sweeps: usize,
    pub converged: bool,
}

impl LassoFit {
    /// `½ rss + λ ‖β‖₁`.
    pub fn objective(&self) -> f64 {
        0.5 * self.rss + self.lambda * self.coefficients.iter().map(|b| b.abs()).sum::<f64>()
    }
}

/// Gram-matrix form of one design, shared by every λ on a path.
///
/// Columns of `x` must already be centered; the intercept is `mean(y)`.
#[derive(Debug, Clone)]
pub struct LassoProblem<'a> {
    x: &'a DMatrix<f64>,
    y_mean: f64,
    y_centered: Vec<f64>,
    gram: DMatrix<f64>,
    xty: Vec<f64>,
}

impl<'a> LassoProblem<'a> {
    pub fn new(x: &'a DMatrix<f64>, y: &[f64]) -> Result<Self> {
        let n = x.nrows();
        if y.len() != n {
            return Err(invalid_arg(format!("response length {} != {n} rows", y.len())));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(invalid_arg("lasso inputs must be finite"));
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let y_centered: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
        let gram = x.tr_mul(x);
        let xty = (x.tr_mul(&DVector::from_column_slice(&y_centered)))
            .iter()
            .copied()
            .collect();
        Ok(Self {
            x,
            y_mean,
            y_centered,
            gram,
            xty,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// `max_j |X_jᵀ(y − ȳ)|`, the smallest λ giving the empty model.
    pub fn lambda_max(&self) -> f64 {
        self.xty.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Cyclic coordinate descent in column order, warm-started from `warm`.
    pub fn solve(&self, lambda: f64, warm: Option<&[f64]>, opts: &LassoOptions) -> Result<LassoFit> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid_arg(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let p = self.p();
        let mut beta = match warm {
            Some(w) if w.len() == p => w.to_vec(),
            Some(w) => {
                return Err(invalid_arg(format!("warm start has {} coefficients, need {p}", w.len())))
            }
            None => vec![0.0; p],
        };
        // corr[j] = X_jᵀ r for the current residual r.
        let mut corr = self.correlations(&beta);
        let tol = opts.kkt_tol * self.n() as f64;
        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < opts.max_sweeps {
            sweeps += 1;
            for j in 0..p {
                let gjj = self.gram[(j, j)];
                if gjj <= 0.0 {
                    continue;
                }
                let z = corr[j] + gjj * beta[j];
                let updated = soft_threshold(z, lambda) / gjj;
                let delta = updated - beta[j];
                if delta != 0.0 {
                    beta[j] = updated;
                    axpy(-delta, self.gram_column(j), &mut corr);
                }
            }
            corr = self.correlations(&beta);
            if kkt_from_correlations(&corr, &beta, lambda) <= tol {
                converged = true;
                break;
            }
        }
        Ok(self.finish(beta, lambda, sweeps, converged))
    }

    fn correlations(&self, beta: &[f64]) -> Vec<f64> {
        let mut corr = self.xty.clone();
        for (k, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                axpy(-b, self.gram_column(k), &mut corr);
            }
        }
        corr
    }

    fn gram_column(&self, j: usize) -> &[f64] {
        let p = self.p();
        &self.gram.as_slice()[j * p..(j + 1) * p]
    }

    fn finish(&self, beta: Vec<f64>, lambda: f64, sweeps: usize, converged: bool) -> LassoFit {
        let mut resid = self.y_centered.clone();
        for (k, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (r, xv) in resid.iter_mut().zip(self.x.column(k).iter()) {
                    *r -= b * xv;
                }
            }
        }
        LassoFit {
            intercept: self.y_mean,
            active_count: beta.iter().filter(|b| **b != 0.0).count(),
            coefficients: beta,
            lambda,
            rss: resid.iter().map(|r| r * r).sum(),
            sweeps,
            converged,
        }
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn kkt_from_correlations(corr: &[f64], beta: &[f64], lambda: f64) -> f64 {
    corr.iter()
        .zip(beta)
        .map(|(&c, &b)| {
            if b != 0.0 {
                (c - lambda * b.signum()).abs()
            } else {
                (c.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Minimizes `½‖y − β₀ − Xβ‖² + λ‖β‖₁` for a column-centered `x`.
pub fn lasso_cd(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<LassoFit> {
    LassoProblem::new(x, y)?.solve(lambda, None, &LassoOptions::default())
}

/// Largest KKT violation, recomputed from scratch: `|X_jᵀr − λ sign β_j|` on
/// the active set and `max(|X_jᵀr| − λ, 0)` elsewhere.
pub fn kkt_residual(x: &DMatrix<f64>, y: &[f64], fit: &LassoFit) -> f64 {
    let mut r: Vec<f64> = y.iter().map(|v| v - fit.intercept).collect();
    for (k, &b) in fit.coefficients.iter().enumerate() {
        for (ri, xv) in r.iter_mut().zip(x.column(k).iter()) {
            *ri -= b * xv;
        }
    }
    let corr: Vec<f64> = x
        .column_iter()
        .map(|c| c.iter().zip(&r).map(|(a, b)| a * b).sum())
        .collect();
    kkt_from_correlations(&corr, &fit.coefficients, fit.lambda)
}
