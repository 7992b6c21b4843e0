use std::io::Write;

use serde::{Deserialize, Serialize};

use super::lasso::{LassoFit, LassoOptions, LassoProblem};
use super::spam::{SpamFit, SpamOptions, SpamSolver};
use crate::error::{invalid_arg, Result};
use crate::smoothing::SplineSmoother;

pub const DEFAULT_GRID_LEN: usize = 50;
pub const DEFAULT_GRID_RATIO: f64 = 1e-3;

/// Anything that can be scored by BIC.
pub trait PathFit {
    fn rss(&self) -> f64;
    /// Degrees of freedom including the intercept.
    fn df(&self) -> f64;
}

impl PathFit for LassoFit {
    fn rss(&self) -> f64 {
        self.rss
    }

    fn df(&self) -> f64 {
        1.0 + self.active_count as f64
    }
}

impl PathFit for SpamFit {
    fn rss(&self) -> f64 {
        self.rss
    }

    fn df(&self) -> f64 {
        self.df
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelPath<F> {
    pub lambdas: Vec<f64>,
    pub fits: Vec<F>,
    pub bic: Vec<f64>,
    pub selected: usize,
}

impl<F: PathFit> ModelPath<F> {
    pub fn from_fits(lambdas: Vec<f64>, fits: Vec<F>, n: usize) -> Result<Self> {
        if fits.is_empty() || fits.len() != lambdas.len() {
            return Err(invalid_arg("path needs one fit per lambda and at least one fit"));
        }
        if lambdas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid_arg("lambda grid must be strictly descending"));
        }
        let bic: Vec<f64> = fits.iter().map(|f| bic(f.rss(), f.df(), n)).collect();
        let selected = select_bic(&bic);
        Ok(Self {
            lambdas,
            fits,
            bic,
            selected,
        })
    }

    pub fn selected_fit(&self) -> &F {
        &self.fits[self.selected]
    }

    /// Diagnostic rows `(lambda, rss, df, bic)`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "lambda,rss,df,bic,selected")?;
        for (i, (l, f)) in self.lambdas.iter().zip(&self.fits).enumerate() {
            writeln!(
                out,
                "{l:.12e},{:.12e},{},{:.12e},{}",
                f.rss(),
                f.df(),
                self.bic[i],
                u8::from(i == self.selected)
            )?;
        }
        Ok(())
    }
}

/// `n log(rss/n) + df log n`; a perfect fit scores −∞.
pub fn bic(rss: f64, df: f64, n: usize) -> f64 {
    if rss <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let n = n as f64;
    n * (rss / n).ln() + df * n.ln()
}

/// Index of the minimum; ties resolve to the later (smaller-λ) entry.
pub fn select_bic(bic: &[f64]) -> usize {
    let mut best = 0;
    for (i, &b) in bic.iter().enumerate() {
        if b <= bic[best] {
            best = i;
        }
    }
    best
}

/// `len` geometrically spaced values from `lambda_max` down to `lambda_max · ratio`.
pub fn geometric_grid(lambda_max: f64, len: usize, ratio: f64) -> Vec<f64> {
    if len == 1 {
        return vec![lambda_max];
    }
    let step = ratio.ln() / (len - 1) as f64;
    (0..len).map(|i| lambda_max * (step * i as f64).exp()).collect()
}

pub fn lasso_lambda_max(problem: &LassoProblem<'_>) -> f64 {
    problem.lambda_max()
}

/// `max_j ‖S_j(y − ȳ)‖`.
pub fn spam_lambda_max(smoothers: &[SplineSmoother], y: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - m).collect();
    smoothers
        .iter()
        .map(|s| {
            s.project(&yc)
                .iter()
                .zip(s.shrink())
                .map(|(g, w)| (w * g).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

pub fn make_lasso_grid(problem: &LassoProblem<'_>) -> Vec<f64> {
    geometric_grid(problem.lambda_max(), DEFAULT_GRID_LEN, DEFAULT_GRID_RATIO)
}

pub fn make_spam_grid(smoothers: &[SplineSmoother], y: &[f64]) -> Vec<f64> {
    geometric_grid(spam_lambda_max(smoothers, y), DEFAULT_GRID_LEN, DEFAULT_GRID_RATIO)
}

/// Warm-started Lasso fits along a descending grid.
pub fn lasso_path(problem: &LassoProblem<'_>, lambdas: &[f64], opts: &LassoOptions) -> Result<ModelPath<LassoFit>> {
    let mut fits: Vec<LassoFit> = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        let warm = fits.last().map(|f| f.coefficients.as_slice());
        fits.push(problem.solve(l, warm, opts)?);
    }
    ModelPath::from_fits(lambdas.to_vec(), fits, problem.n())
}

/// Warm-started SPAM fits along a descending grid.
pub fn spam_path(
    smoothers: &[SplineSmoother],
    y: &[f64],
    lambdas: &[f64],
    opts: &SpamOptions,
) -> Result<ModelPath<SpamFit>> {
    let mut solver = SpamSolver::new(smoothers, y.len())?;
    let mut fits: Vec<SpamFit> = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        let fit = solver.fit(y, l, opts, fits.last())?;
        fits.push(fit);
    }
    ModelPath::from_fits(lambdas.to_vec(), fits, y.len())
}
