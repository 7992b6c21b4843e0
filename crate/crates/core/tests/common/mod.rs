#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vspam::gabor::{FeatureMatrix, Transform};
use vspam::smoothing::{evaluate_spline, SplineSmoother};

pub fn centered_design(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    let mut x = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
    for mut c in x.column_iter_mut() {
        let m = c.mean();
        c.iter_mut().for_each(|v| *v -= m);
    }
    x
}

/// Minimum of `½‖y − ȳ − Xβ‖² + λ‖β‖₁` over all 3^p sign patterns: for
/// each pattern solve the stationarity equations on its support and keep
/// the solution only if its signs agree with the pattern.
pub fn lasso_oracle(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> f64 {
    let (n, p) = x.shape();
    let ym = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ym));
    let objective = |beta: &DVector<f64>| {
        let r = &yc - x * beta;
        0.5 * r.norm_squared() + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    };
    let mut best = objective(&DVector::zeros(p));
    for code in 0..3usize.pow(p as u32) {
        let mut signs = vec![0.0; p];
        let mut c = code;
        for s in signs.iter_mut() {
            *s = [0.0, 1.0, -1.0][c % 3];
            c /= 3;
        }
        let support: Vec<usize> = (0..p).filter(|&j| signs[j] != 0.0).collect();
        if support.is_empty() {
            continue;
        }
        let xa = x.select_columns(&support);
        let rhs = xa.transpose() * &yc - DVector::from_iterator(support.len(), support.iter().map(|&j| lambda * signs[j]));
        let Some(ba) = (xa.transpose() * &xa).lu().solve(&rhs) else {
            continue;
        };
        if support.iter().zip(ba.iter()).any(|(&j, &b)| b * signs[j] <= 0.0) {
            continue;
        }
        let mut beta = DVector::zeros(p);
        for (&j, &b) in support.iter().zip(ba.iter()) {
            beta[j] = b;
        }
        best = best.min(objective(&beta));
    }
    best
}

/// Trace of `1/n 11ᵀ + B (BᵀB + λΩ)⁻¹ Bᵀ`, with `B` evaluated through the
/// public spline evaluator and `Ω = ∫ B''ᵀB''` by two-point Gauss-Legendre
/// on each knot interval. `B''` is piecewise linear, so the rule is exact.
/// The smoother's penalty is stated on `x` rescaled to the unit knot range,
/// which multiplies `Ω` by `range³`.
pub fn smoother_trace_oracle(sm: &SplineSmoother, x: &[f64]) -> f64 {
    let m = sm.column_means.len();
    let unit = |j: usize| {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        e
    };
    let units: Vec<Vec<f64>> = (0..m).map(unit).collect();
    let b = DMatrix::from_fn(x.len(), m, |i, j| evaluate_spline(&sm.knots, &sm.column_means, false, &units[j], x[i]));
    let mut omega = DMatrix::zeros(m, m);
    let g = 0.5 / 3f64.sqrt();
    for w in sm.knots.windows(2) {
        let (a, c) = (w[0], w[1]);
        let width = c - a;
        let h = 1e-2 * width;
        for node in [0.5 - g, 0.5 + g] {
            let t = a + node * width;
            let second: Vec<f64> = units
                .iter()
                .map(|e| {
                    let f = |s: f64| evaluate_spline(&sm.knots, &sm.column_means, false, e, s);
                    (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h)
                })
                .collect();
            for j in 0..m {
                for k in 0..m {
                    omega[(j, k)] += 0.5 * width * second[j] * second[k];
                }
            }
        }
    }
    let range = sm.knots[sm.knots.len() - 1] - sm.knots[0];
    let btb = b.transpose() * &b;
    let inner = (&btb + omega * (sm.penalty * range.powi(3))).lu().solve(&btb).expect("penalized gram is invertible");
    1.0 + inner.trace()
}

/// Raw features drawn as squared uniforms so the sqrt transform is uniform.
pub fn random_raw_features(rng: &mut ChaCha8Rng, n: usize, p: usize) -> FeatureMatrix {
    let v = DMatrix::from_fn(n, p, |_, _| rng.gen_range(0.0f64..2.0).powi(2));
    FeatureMatrix::new(v, Transform::Raw, "test-bank").unwrap()
}
