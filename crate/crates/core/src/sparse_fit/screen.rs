use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenResult {
    pub kept: Vec<usize>,
    /// Absolute marginal correlations of `kept`, non-increasing.
    pub correlations: Vec<f64>,
}

/// Keeps the `k` columns with the largest absolute correlation with `y`.
/// Constant columns score 0; ties go to the lower index.
pub fn screen_by_correlation(x: &DMatrix<f64>, y: &[f64], k: usize) -> Result<ScreenResult> {
    let n = x.nrows();
    if y.len() != n {
        return Err(invalid_arg(format!("response length {} != {n} rows", y.len())));
    }
    if k == 0 {
        return Err(invalid_arg("screening needs k >= 1"));
    }
    let ym = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - ym).collect();
    let syy: f64 = yc.iter().map(|v| v * v).sum();
    if !(syy > 0.0) {
        return Err(invalid_arg("cannot screen against a constant response"));
    }
    let mut scored: Vec<(usize, f64)> = x
        .column_iter()
        .enumerate()
        .map(|(j, col)| {
            let xm = col.mean();
            let (mut sxx, mut sxy) = (0.0, 0.0);
            for (xi, yi) in col.iter().zip(&yc) {
                let d = xi - xm;
                sxx += d * d;
                sxy += d * yi;
            }
            let r = if sxx > 0.0 { (sxy / (sxx * syy).sqrt()).abs().min(1.0) } else { 0.0 };
            (j, r)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k.min(x.ncols()));
    Ok(ScreenResult {
        kept: scored.iter().map(|s| s.0).collect(),
        correlations: scored.iter().map(|s| s.1).collect(),
    })
}

/// Per-column centering and unit-sample-sd scaling recorded at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Zero-variance columns keep scale 1 and become all-zero after centering.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut center = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.mean();
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            center.push(m);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { center, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (c, s) = (self.center[j], self.scale[j]);
            col.iter_mut().for_each(|v| *v = (*v - c) / s);
        }
        out
    }
}
