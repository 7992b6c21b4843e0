//! Univariate linear smoothers: a penalized natural cubic regression spline
//! calibrated to a target effective degrees of freedom, and local-linear LOESS.
//!
//! The spline smoother is reduced once at build time to an orthonormal basis
//! `U` (n x m, columns orthogonal to the constant) and shrink factors `w`, so
//! that the centered smoother matrix is `U diag(w) Uᵀ` and its trace is
//! `1 + Σ w` once the unpenalized intercept is counted.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

/// Decile levels used as interior knots.
pub const INTERIOR_KNOT_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const TRACE_TOLERANCE: f64 = 1e-6;
const LOG_LAMBDA_BRACKET: (f64, f64) = (-12.0, 12.0);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplineSmoother {
    pub knots: Vec<f64>,
    pub penalty: f64,
    /// Basis size including the constant.
    pub basis_dim: usize,
    pub target_df: f64,
    pub hat_trace: f64,
    pub linear_fallback: bool,
    /// Training means of the non-constant basis columns.
    pub column_means: Vec<f64>,
    #[serde(skip)]
    n: usize,
    /// Column-major `n x m` orthonormal basis.
    #[serde(skip)]
    ortho: Vec<f64>,
    #[serde(skip)]
    shrink: Vec<f64>,
    /// Eigenvalues of the curvature penalty in orthonormal coordinates.
    #[serde(skip)]
    curvature: Vec<f64>,
    /// Maps orthonormal coordinates to basis coefficients, `m x m`.
    #[serde(skip)]
    to_basis: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherFit {
    pub fitted: Vec<f64>,
    pub centered: bool,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Min, interior deciles, max; deduplicated to a strictly increasing sequence.
pub fn decile_knots(x: &[f64]) -> Vec<f64> {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let eps = 1e-10 * (hi - lo).abs().max(f64::MIN_POSITIVE);
    let mut knots = vec![lo];
    for &q in &INTERIOR_KNOT_LEVELS {
        knots.push(quantile_sorted(&sorted, q));
    }
    knots.push(hi);
    let mut out: Vec<f64> = Vec::with_capacity(knots.len());
    for k in knots {
        if out.last().map_or(true, |&last| k - last > eps) {
            out.push(k);
        }
    }
    out
}

/// Non-constant natural cubic spline basis functions at `x`, in the truncated
/// power form on knots rescaled to [0, 1].
fn ns_row(x: f64, knots: &[f64], out: &mut [f64]) {
    let k = knots.len();
    let (lo, hi) = (knots[0], knots[k - 1]);
    let scale = hi - lo;
    let t = (x - lo) / scale;
    let last = 1.0;
    let d = |xi: f64| {
        let a = (t - xi).max(0.0).powi(3);
        let b = (t - last).max(0.0).powi(3);
        (a - b) / (last - xi)
    };
    out[0] = t;
    let xi_penult = (knots[k - 2] - lo) / scale;
    let d_last = d(xi_penult);
    for j in 0..k - 2 {
        let xi = (knots[j] - lo) / scale;
        out[j + 1] = d(xi) - d_last;
    }
}

/// Second derivative of each non-constant basis function at scaled `t` in [0, 1].
fn ns_second_derivative(t: f64, scaled_knots: &[f64], out: &mut [f64]) {
    let k = scaled_knots.len();
    let dd = |xi: f64| 6.0 * (t - xi).max(0.0) / (1.0 - xi);
    out[0] = 0.0;
    let d_last = dd(scaled_knots[k - 2]);
    for j in 0..k - 2 {
        out[j + 1] = dd(scaled_knots[j]) - d_last;
    }
}

/// Exact Gram matrix of second derivatives over [knot_min, knot_max] in the
/// scaled coordinate; products are piecewise quadratic so Simpson per knot
/// interval is exact.
fn curvature_gram(knots: &[f64]) -> DMatrix<f64> {
    let k = knots.len();
    let m = k - 1;
    let (lo, hi) = (knots[0], knots[k - 1]);
    let scaled: Vec<f64> = knots.iter().map(|v| (v - lo) / (hi - lo)).collect();
    let mut omega = DMatrix::zeros(m, m);
    let (mut fa, mut fm, mut fb) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for w in scaled.windows(2) {
        let (a, b) = (w[0], w[1]);
        ns_second_derivative(a, &scaled, &mut fa);
        ns_second_derivative(0.5 * (a + b), &scaled, &mut fm);
        ns_second_derivative(b, &scaled, &mut fb);
        let h = (b - a) / 6.0;
        for i in 0..m {
            for j in 0..m {
                omega[(i, j)] += h * (fa[i] * fa[j] + 4.0 * fm[i] * fm[j] + fb[i] * fb[j]);
            }
        }
    }
    omega
}

fn distinct_count(x: &[f64]) -> usize {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

impl SplineSmoother {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of orthonormal directions (basis size without the constant).
    pub fn rank(&self) -> usize {
        self.shrink.len()
    }

    /// Column-major `n x rank` orthonormal basis.
    pub fn ortho(&self) -> &[f64] {
        &self.ortho
    }

    pub fn ortho_column(&self, k: usize) -> &[f64] {
        &self.ortho[k * self.n..(k + 1) * self.n]
    }

    pub fn shrink(&self) -> &[f64] {
        &self.shrink
    }

    /// Trace of the full (intercept-including) smoother at the given penalty.
    pub fn trace_at(&self, penalty: f64) -> f64 {
        1.0 + self
            .curvature
            .iter()
            .map(|d| 1.0 / (1.0 + penalty * d))
            .sum::<f64>()
    }

    /// Coordinates `Uᵀ r`.
    pub fn project(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rank()];
        self.project_into(r, &mut out);
        out
    }

    /// `Uᵀ r` into `out`; each entry equals `dot(U_k, r)` bit for bit, but
    /// columns are processed four at a time in a single pass over `r`.
    pub fn project_into(&self, r: &[f64], out: &mut [f64]) {
        let rank = self.rank();
        let mut k = 0;
        while k + 4 <= rank {
            let cols = [0, 1, 2, 3].map(|q| self.ortho_column(k + q));
            out[k..k + 4].copy_from_slice(&dot_many(cols, r));
            k += 4;
        }
        for k in k..rank {
            out[k] = dot(self.ortho_column(k), r);
        }
    }

    /// `U c`, accumulated into `out` with weight `alpha`.
    pub fn expand_into(&self, coords: &[f64], alpha: f64, out: &mut [f64]) {
        // Columns are applied in order at every sample, four per pass.
        let terms: Vec<(f64, &[f64])> = coords
            .iter()
            .enumerate()
            .map(|(k, &c)| (alpha * c, self.ortho_column(k)))
            .filter(|(a, _)| *a != 0.0)
            .collect();
        let mut groups = terms.chunks_exact(4);
        for g in &mut groups {
            let (a, u) = ([g[0].0, g[1].0, g[2].0, g[3].0], [g[0].1, g[1].1, g[2].1, g[3].1]);
            for (i, o) in out.iter_mut().enumerate() {
                *o = (((*o + a[0] * u[0][i]) + a[1] * u[1][i]) + a[2] * u[2][i]) + a[3] * u[3][i];
            }
        }
        for &(a, u) in groups.remainder() {
            for (o, v) in out.iter_mut().zip(u) {
                *o += a * v;
            }
        }
    }

    /// Basis coefficients for the function whose training values are `U c`.
    pub fn basis_coefficients(&self, coords: &[f64]) -> Vec<f64> {
        match &self.to_basis {
            Some(t) => (t * DVector::from_column_slice(coords)).iter().copied().collect(),
            None => Vec::new(),
        }
    }

    pub fn apply(&self, r: &[f64]) -> Result<SmootherFit> {
        if r.len() != self.n {
            return Err(invalid_arg(format!(
                "smoother built on {} samples applied to {}",
                self.n,
                r.len()
            )));
        }
        let coords: Vec<f64> = self
            .project(r)
            .iter()
            .zip(&self.shrink)
            .map(|(c, w)| c * w)
            .collect();
        let mut fitted = vec![0.0; self.n];
        self.expand_into(&coords, 1.0, &mut fitted);
        center(&mut fitted);
        Ok(SmootherFit {
            fitted,
            centered: true,
        })
    }

    /// Dense centered smoother matrix; for diagnostics and tests.
    pub fn materialize(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.n, self.n);
        for k in 0..self.rank() {
            let u = self.ortho_column(k);
            let w = self.shrink[k];
            for j in 0..self.n {
                for i in 0..self.n {
                    s[(i, j)] += w * u[i] * u[j];
                }
            }
        }
        s
    }

    /// Evaluates the function with the given basis coefficients at `x`;
    /// linear beyond the boundary knots.
    pub fn evaluate(&self, coefficients: &[f64], x: f64) -> f64 {
        evaluate_spline(&self.knots, &self.column_means, self.linear_fallback, coefficients, x)
    }
}

/// Stateless evaluation so serialized models need only knots, column means
/// and coefficients.
pub fn evaluate_spline(knots: &[f64], column_means: &[f64], linear: bool, coefficients: &[f64], x: f64) -> f64 {
    if coefficients.is_empty() {
        return 0.0;
    }
    if linear {
        return (x - column_means[0]) * coefficients[0];
    }
    let mut row = vec![0.0; knots.len() - 1];
    ns_row(x, knots, &mut row);
    row.iter()
        .zip(column_means)
        .zip(coefficients)
        .map(|((b, m), c)| (b - m) * c)
        .sum()
}

/// Inner product with independent partial sums so the loop is not bound by
/// add latency.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().min(b.len());
    let (a, b) = (&a[..len], &b[..len]);
    let mut acc = [0.0; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `M` simultaneous [`dot`] products against the same `b`.
fn dot_many<const M: usize>(cols: [&[f64]; M], b: &[f64]) -> [f64; M] {
    let len = cols.iter().fold(b.len(), |l, c| l.min(c.len()));
    let chunks = len / 8;
    let mut acc = [[0.0; 8]; M];
    for c in 0..chunks {
        let bb = &b[c * 8..c * 8 + 8];
        for q in 0..M {
            let a = &cols[q][c * 8..c * 8 + 8];
            for k in 0..8 {
                acc[q][k] += a[k] * bb[k];
            }
        }
    }
    std::array::from_fn(|q| {
        let a = &acc[q];
        let tail: f64 = cols[q][chunks * 8..len].iter().zip(&b[chunks * 8..len]).map(|(x, y)| x * y).sum();
        ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7])) + tail
    })
}

pub(crate) fn center(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

fn linear_smoother(x: &[f64], target_df: f64) -> SplineSmoother {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (ortho, shrink, to_basis) = if norm > 0.0 {
        (
            centered.iter().map(|v| v / norm).collect(),
            vec![1.0],
            Some(DMatrix::from_element(1, 1, 1.0 / norm)),
        )
    } else {
        (Vec::new(), Vec::new(), None)
    };
    let knots = decile_knots(x);
    let curvature = vec![0.0; shrink.len()];
    SplineSmoother {
        knots,
        penalty: 0.0,
        basis_dim: 1 + shrink.len(),
        target_df,
        hat_trace: 1.0 + shrink.len() as f64,
        linear_fallback: true,
        column_means: vec![mean],
        n,
        ortho,
        shrink,
        curvature,
        to_basis,
    }
}

/// Penalized natural cubic spline smoother with knots at the deciles of `x`
/// and penalty chosen so the smoother-matrix trace equals `target_df`.
///
/// Fewer than four distinct knot locations degrade to centered linear
/// regression on `x` (`linear_fallback`).
pub fn build_smoother(x: &[f64], target_df: f64) -> Result<SplineSmoother> {
    let n = x.len();
    if n < 10 {
        return Err(invalid_arg(format!("smoother needs at least 10 samples, got {n}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid_arg("smoother inputs must be finite"));
    }
    if !(target_df > 2.0) {
        return Err(invalid_arg(format!("target df must exceed 2, got {target_df}")));
    }
    let knots = decile_knots(x);
    if knots.len() < 4 || distinct_count(x) < 4 {
        return Ok(linear_smoother(x, target_df));
    }
    let basis_dim = knots.len();
    if target_df > basis_dim as f64 {
        return Err(invalid_arg(format!(
            "target df {target_df} exceeds basis dimension {basis_dim}"
        )));
    }
    let m = basis_dim - 1;

    let mut design = DMatrix::zeros(n, m);
    let mut row = vec![0.0; m];
    for (i, &xi) in x.iter().enumerate() {
        ns_row(xi, &knots, &mut row);
        for j in 0..m {
            design[(i, j)] = row[j];
        }
    }
    let column_means: Vec<f64> = (0..m).map(|j| design.column(j).mean()).collect();
    for j in 0..m {
        let mu = column_means[j];
        design.column_mut(j).iter_mut().for_each(|v| *v -= mu);
    }

    let gram = design.transpose() * &design;
    let Some(chol) = gram.clone().cholesky() else {
        return Ok(linear_smoother(x, target_df));
    };
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .expect("cholesky factor is invertible");
    let omega = curvature_gram(&knots);
    let reduced = &l_inv * omega * l_inv.transpose();
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let eig = SymmetricEigen::new(reduced);
    let to_basis = l_inv.transpose() * &eig.eigenvectors;
    let d: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();

    let trace = |lambda: f64| 1.0 + d.iter().map(|di| 1.0 / (1.0 + lambda * di)).sum::<f64>();
    let penalty = calibrate_penalty(&trace, target_df);

    let mut ortho_m = &design * &to_basis;
    // Re-center to absorb rounding so fitted functions stay mean-zero.
    for j in 0..m {
        let mu = ortho_m.column(j).mean();
        ortho_m.column_mut(j).iter_mut().for_each(|v| *v -= mu);
    }
    let shrink: Vec<f64> = d.iter().map(|di| 1.0 / (1.0 + penalty * di)).collect();
    Ok(SplineSmoother {
        knots,
        penalty,
        basis_dim,
        target_df,
        hat_trace: trace(penalty),
        linear_fallback: false,
        column_means,
        n,
        ortho: ortho_m.as_slice().to_vec(),
        shrink,
        curvature: d,
        to_basis: Some(to_basis),
    })
}

/// Bisection on `log10 λ`; the trace is strictly decreasing in λ.
fn calibrate_penalty(trace: &dyn Fn(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = LOG_LAMBDA_BRACKET;
    if trace(0.0) - target <= TRACE_TOLERANCE * 1e-3 {
        return 0.0;
    }
    while trace(10f64.powf(lo)) < target && lo > -300.0 {
        lo -= 12.0;
    }
    while trace(10f64.powf(hi)) > target && hi < 300.0 {
        hi += 12.0;
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..400 {
        mid = 0.5 * (lo + hi);
        let t = trace(10f64.powf(mid));
        if (t - target).abs() <= TRACE_TOLERANCE * 1e-3 {
            break;
        }
        if t > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    10f64.powf(mid)
}

/// Local-linear regression with tricube weights over the `ceil(span·n)`
/// nearest neighbours of each point, evaluated at every `x[i]`.
pub fn loess(x: &[f64], y: &[f64], span: f64) -> Result<Vec<f64>> {
    let n = x.len();
    if y.len() != n {
        return Err(invalid_arg("loess: x and y lengths differ"));
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(invalid_arg(format!("loess span must lie in (0, 1], got {span}")));
    }
    if n < 10 {
        return Err(invalid_arg(format!("loess needs at least 10 points, got {n}")));
    }
    let q = ((span * n as f64).ceil() as usize).clamp(2, n);
    let mut dist = vec![0.0; n];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        for (d, &xj) in dist.iter_mut().zip(x) {
            *d = (xj - x[i]).abs();
        }
        let mut scratch = dist.clone();
        let (_, &mut h, _) = scratch.select_nth_unstable_by(q - 1, f64::total_cmp);
        out.push(local_linear(x, y, &dist, h, x[i]));
    }
    Ok(out)
}

fn local_linear(x: &[f64], y: &[f64], dist: &[f64], h: f64, at: f64) -> f64 {
    let mut sw = 0.0;
    let mut swx = 0.0;
    let mut swy = 0.0;
    if h > 0.0 {
        for ((&xj, &yj), &d) in x.iter().zip(y).zip(dist) {
            if d < h {
                let u = d / h;
                let w = (1.0 - u * u * u).powi(3);
                sw += w;
                swx += w * xj;
                swy += w * yj;
            }
        }
    }
    if sw <= 0.0 {
        // Degenerate neighbourhood: plain mean of the tied neighbours.
        let (s, c) = x
            .iter()
            .zip(y)
            .zip(dist)
            .filter(|(_, &d)| d <= h)
            .fold((0.0, 0usize), |(s, c), ((_, &yj), _)| (s + yj, c + 1));
        return s / c as f64;
    }
    let mx = swx / sw;
    let my = swy / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((&xj, &yj), &d) in x.iter().zip(y).zip(dist) {
        if d < h {
            let u = d / h;
            let w = (1.0 - u * u * u).powi(3);
            sxx += w * (xj - mx) * (xj - mx);
            sxy += w * (xj - mx) * (yj - my);
        }
    }
    let scale = x.iter().map(|v| (v - mx).abs()).fold(0.0, f64::max).max(1e-300);
    if sxx <= 1e-12 * sw * scale * scale {
        return my;
    }
    my + sxy / sxx * (at - mx)
}
