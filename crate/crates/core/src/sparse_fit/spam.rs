use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::smoothing::{dot, SplineSmoother};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpamOptions {
    pub max_cycles: usize,
    /// Relative RSS change per full cycle below which backfitting stops.
    pub tol: f64,
}

impl Default for SpamOptions {
    fn default() -> Self {
        Self {
            max_cycles: 500,
            tol: 1e-8,
        }
    }
}

/// One nonzero additive function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpamComponent {
    /// Index into the smoother list.
    pub feature: usize,
    /// Coordinates in the smoother's orthonormal basis.
    pub coords: Vec<f64>,
    /// Spline basis coefficients for out-of-sample evaluation.
    pub coefficients: Vec<f64>,
    /// Fitted values on the training samples (mean zero).
    pub fitted: Vec<f64>,
}

impl SpamComponent {
    pub fn norm(&self) -> f64 {
        self.fitted.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpamFit {
    pub intercept: f64,
    pub lambda: f64,
    /// Active functions in ascending feature order.
    pub components: Vec<SpamComponent>,
    pub active_set: Vec<usize>,
    pub rss: f64,
    /// `rss + λ Σ‖f̂_j‖`.
    pub objective: f64,
    /// Sum of the active smoothers' effective degrees of freedom, plus one
    /// for the intercept.
    pub df: f64,
    pub cycles: usize,
    pub converged: bool,
    /// Objective after each full cycle.
    pub objective_trace: Vec<f64>,
}

impl SpamFit {
    /// Training values of function `j` (zero when inactive).
    pub fn function(&self, j: usize, n: usize) -> Vec<f64> {
        self.components
            .iter()
            .find(|c| c.feature == j)
            .map_or_else(|| vec![0.0; n], |c| c.fitted.clone())
    }

    pub fn fitted_values(&self, n: usize) -> Vec<f64> {
        let mut out = vec![self.intercept; n];
        for c in &self.components {
            for (o, f) in out.iter_mut().zip(&c.fitted) {
                *o += f;
            }
        }
        out
    }

    pub fn penalty_sum(&self) -> f64 {
        self.components.iter().map(SpamComponent::norm).sum()
    }
}

/// `s (1 − λ/‖s‖)₊`.
pub fn soft_threshold_vector(s: &[f64], lambda: f64) -> Vec<f64> {
    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let factor = if norm > lambda { 1.0 - lambda / norm } else { 0.0 };
    s.iter().map(|v| v * factor).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// SPAM backfitting.
///
/// `β̂₀ = ȳ`; each cycle visits every feature in order, smooths its partial
/// residual and soft-thresholds the result. Cycles stop when the relative RSS
/// change falls below `opts.tol` or after `opts.max_cycles`, in which case the
/// fit is flagged non-converged.
pub fn spam_backfit(
    smoothers: &[SplineSmoother],
    y: &[f64],
    lambda: f64,
    opts: &SpamOptions,
    warm: Option<&SpamFit>,
) -> Result<SpamFit> {
    SpamSolver::new(smoothers, y.len())?.fit(y, lambda, opts, warm)
}

/// Backfitting state shared across the fits of one path.
///
/// Every function lives in its smoother's column space, so the partial
/// residual smoothing is carried out in orthonormal coordinates:
/// `U_jᵀ R_j = U_jᵀ r + c_j` with `r` the full residual. The projections
/// `U_jᵀ r` are kept for all features and updated through cached blocks
/// `U_jᵀ U_k` whenever function `k` changes.
pub struct SpamSolver<'a> {
    smoothers: &'a [SplineSmoother],
    n: usize,
    offsets: Vec<usize>,
    total: usize,
    /// All orthonormal bases side by side, built on first use.
    stacked: Option<DMatrix<f64>>,
    /// `cross[k]`, when present, holds `Uᵀ U_k` column-major.
    cross: Vec<Option<DMatrix<f64>>>,
}

/// Above this many active functions, projecting the residual directly is
/// cheaper than propagating each update through `Uᵀ U_k`.
const MAX_INCREMENTAL_ACTIVE: usize = 40;

impl<'a> SpamSolver<'a> {
    pub fn new(smoothers: &'a [SplineSmoother], n: usize) -> Result<Self> {
        if smoothers.iter().any(|s| s.n() != n) {
            return Err(invalid_arg("all smoothers must be built on the response's samples"));
        }
        let mut offsets = Vec::with_capacity(smoothers.len());
        let mut total = 0;
        for s in smoothers {
            offsets.push(total);
            total += s.rank();
        }
        Ok(Self {
            smoothers,
            n,
            offsets,
            total,
            stacked: None,
            cross: vec![None; smoothers.len()],
        })
    }

    fn project_all(&self, resid: &[f64]) -> Vec<f64> {
        let mut proj = Vec::with_capacity(self.total);
        for s in self.smoothers {
            proj.extend(s.project(resid));
        }
        proj
    }

    fn cross_block(&mut self, k: usize) -> &DMatrix<f64> {
        if self.cross[k].is_none() {
            let n = self.n;
            let smoothers = self.smoothers;
            let stacked = self.stacked.get_or_insert_with(|| {
                let mut data = Vec::with_capacity(n * smoothers.iter().map(|s| s.rank()).sum::<usize>());
                for s in smoothers {
                    data.extend_from_slice(s.ortho());
                }
                DMatrix::from_vec(n, data.len() / n.max(1), data)
            });
            let sk = &self.smoothers[k];
            let uk = DMatrix::from_column_slice(n, sk.rank(), sk.ortho());
            self.cross[k] = Some(stacked.tr_mul(&uk));
        }
        self.cross[k].as_ref().expect("cross block just built")
    }

    /// Applies `c_k += delta` to the residual and every projection.
    fn shift(&mut self, k: usize, delta: &[f64], resid: &mut [f64], proj: &mut [f64]) {
        self.smoothers[k].expand_into(delta, -1.0, resid);
        let block = self.cross_block(k);
        for (b, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                for (p, g) in proj.iter_mut().zip(block.column(b).iter()) {
                    *p -= d * g;
                }
            }
        }
    }

    pub fn fit(&mut self, y: &[f64], lambda: f64, opts: &SpamOptions, warm: Option<&SpamFit>) -> Result<SpamFit> {
        let n = self.n;
        if y.len() != n {
            return Err(invalid_arg(format!("response length {} != {n} samples", y.len())));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid_arg(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid_arg("response must be finite"));
        }
        let smoothers = self.smoothers;
        let intercept = y.iter().sum::<f64>() / n as f64;
        let mut resid: Vec<f64> = y.iter().map(|v| v - intercept).collect();
        let mut coords: Vec<Vec<f64>> = smoothers.iter().map(|s| vec![0.0; s.rank()]).collect();
        if let Some(w) = warm {
            for c in &w.components {
                if c.feature < smoothers.len() && c.coords.len() == smoothers[c.feature].rank() {
                    smoothers[c.feature].expand_into(&c.coords, -1.0, &mut resid);
                    coords[c.feature] = c.coords.clone();
                }
            }
        }
        let active = |coords: &[Vec<f64>]| coords.iter().filter(|c| c.iter().any(|v| *v != 0.0)).count();
        let mut incremental = active(&coords) <= MAX_INCREMENTAL_ACTIVE;
        let mut proj = if incremental { self.project_all(&resid) } else { Vec::new() };

        let mut rss_prev = dot(&resid, &resid);
        let mut trace = Vec::new();
        let mut cycles = 0;
        let mut converged = false;
        let mut delta = Vec::new();
        let mut direct = Vec::new();
        while cycles < opts.max_cycles {
            cycles += 1;
            for (j, sm) in smoothers.iter().enumerate() {
                if sm.rank() == 0 {
                    continue;
                }
                let projected = if incremental {
                    let off = self.offsets[j];
                    &proj[off..off + sm.rank()]
                } else {
                    direct.resize(sm.rank(), 0.0);
                    sm.project_into(&resid, &mut direct);
                    &direct[..]
                };
                let smoothed: Vec<f64> = projected
                    .iter()
                    .zip(&coords[j])
                    .zip(sm.shrink())
                    .map(|((g, c), w)| w * (g + c))
                    .collect();
                let updated = soft_threshold_vector(&smoothed, lambda);
                delta.clear();
                delta.extend(updated.iter().zip(&coords[j]).map(|(u, c)| u - c));
                if delta.iter().any(|d| *d != 0.0) {
                    if incremental {
                        self.shift(j, &delta, &mut resid, &mut proj);
                    } else {
                        sm.expand_into(&delta, -1.0, &mut resid);
                    }
                    coords[j] = updated;
                }
            }
            if incremental && active(&coords) > MAX_INCREMENTAL_ACTIVE {
                incremental = false;
            }
            let rss = dot(&resid, &resid);
            trace.push(rss + lambda * coords.iter().map(|c| norm(c)).sum::<f64>());
            let change = (rss_prev - rss).abs();
            rss_prev = rss;
            if change <= opts.tol * rss.max(f64::MIN_POSITIVE) || rss == 0.0 {
                converged = true;
                break;
            }
        }
        Ok(self.finish(y, intercept, lambda, &coords, cycles, converged, trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        y: &[f64],
        intercept: f64,
        lambda: f64,
        coords: &[Vec<f64>],
        cycles: usize,
        converged: bool,
        objective_trace: Vec<f64>,
    ) -> SpamFit {
        let n = self.n;
        let mut components = Vec::new();
        for (j, (sm, c)) in self.smoothers.iter().zip(coords).enumerate() {
            if c.iter().any(|v| *v != 0.0) {
                let mut fitted = vec![0.0; n];
                sm.expand_into(c, 1.0, &mut fitted);
                components.push(SpamComponent {
                    feature: j,
                    coords: c.clone(),
                    coefficients: sm.basis_coefficients(c),
                    fitted,
                });
            }
        }
        let mut fitted_total = vec![intercept; n];
        for c in &components {
            for (o, v) in fitted_total.iter_mut().zip(&c.fitted) {
                *o += v;
            }
        }
        let rss: f64 = y.iter().zip(&fitted_total).map(|(a, b)| (a - b).powi(2)).sum();
        let penalty: f64 = components.iter().map(SpamComponent::norm).sum();
        let df = 1.0
            + components
                .iter()
                .map(|c| {
                    let sm = &self.smoothers[c.feature];
                    if sm.linear_fallback { sm.hat_trace } else { sm.target_df }
                })
                .sum::<f64>();
        SpamFit {
            intercept,
            lambda,
            active_set: components.iter().map(|c| c.feature).collect(),
            components,
            rss,
            objective: rss + lambda * penalty,
            df,
            cycles,
            converged,
            objective_trace,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::build_smoother;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, n: usize, p: usize) -> (Vec<SplineSmoother>, Vec<f64>) {
        let (sms, y, _) = instance_with_columns(seed, n, p);
        (sms, y)
    }

    fn instance_with_columns(seed: u64, n: usize, p: usize) -> (Vec<SplineSmoother>, Vec<f64>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| (3.0 * cols[0][i]).sin() + cols[1 % p][i].powi(2) + 0.3 * rng.gen_range(-1.0..1.0))
            .collect();
        (cols.iter().map(|c| build_smoother(c, 4.0).unwrap()).collect(), y, cols)
    }

    fn lambda_max(sms: &[SplineSmoother], y: &[f64]) -> f64 {
        crate::sparse_fit::spam_lambda_max(sms, y)
    }

    #[test]
    fn full_shrinkage_kills_every_function() {
        let (sms, y) = instance(4, 120, 3);
        let lmax = lambda_max(&sms, &y);
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - m).collect();
        let via_apply = sms.iter().map(|s| norm(&s.apply(&yc).unwrap().fitted)).fold(0.0, f64::max);
        assert!((lmax - via_apply).abs() < 1e-10 * lmax);
        let fit = spam_backfit(&sms, &y, lmax, &SpamOptions::default(), None).unwrap();
        assert!(fit.components.is_empty());
        let below = spam_backfit(&sms, &y, lmax * (1.0 - 1e-6), &SpamOptions::default(), None).unwrap();
        assert!(!below.components.is_empty());
        assert_eq!(fit.cycles, 1);
        assert_eq!(fit.intercept, y.iter().sum::<f64>() / 120.0);
    }

    #[test]
    fn zero_penalty_single_feature_is_one_smoothing_step() {
        let (sms, y) = instance(5, 150, 1);
        let fit = spam_backfit(&sms, &y, 0.0, &SpamOptions::default(), None).unwrap();
        let m = y.iter().sum::<f64>() / 150.0;
        let yc: Vec<f64> = y.iter().map(|v| v - m).collect();
        let plain = sms[0].apply(&yc).unwrap().fitted;
        for (a, b) in fit.function(0, 150).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(fit.converged);
    }

    #[test]
    fn components_are_centered_and_objective_recomputes() {
        let (sms, y, cols) = instance_with_columns(6, 200, 4);
        let fit = spam_backfit(&sms, &y, 0.2 * lambda_max(&sms, &y), &SpamOptions::default(), None).unwrap();
        assert!(!fit.components.is_empty());
        for c in &fit.components {
            assert!((c.fitted.iter().sum::<f64>() / 200.0).abs() < 1e-12);
            let x = &cols[c.feature];
            for (i, v) in c.fitted.iter().enumerate() {
                assert!((sms[c.feature].evaluate(&c.coefficients, x[i]) - v).abs() < 1e-9);
            }
        }
        let recomputed = fit.rss + fit.lambda * fit.penalty_sum();
        assert!((recomputed - fit.objective).abs() < 1e-8);
        assert_eq!(fit.df, 1.0 + 4.0 * fit.active_set.len() as f64);
    }

    #[test]
    fn warm_start_agrees_with_cold_start() {
        let (sms, y) = instance(7, 200, 3);
        let lmax = lambda_max(&sms, &y);
        let opts = SpamOptions::default();
        let first = spam_backfit(&sms, &y, 0.5 * lmax, &opts, None).unwrap();
        let warm = spam_backfit(&sms, &y, 0.3 * lmax, &opts, Some(&first)).unwrap();
        let cold = spam_backfit(&sms, &y, 0.3 * lmax, &opts, None).unwrap();
        assert!((warm.objective - cold.objective).abs() < 1e-6);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let (sms, y) = instance(8, 200, 3);
        let opts = SpamOptions { max_cycles: 1, tol: 0.0 };
        let fit = spam_backfit(&sms, &y, 0.01, &opts, None).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.cycles, 1);
    }

    proptest! {
        #[test]
        fn soft_threshold_shrinks_norm_by_lambda(
            s in proptest::collection::vec(-10.0f64..10.0, 1..20),
            lambda in 0.0f64..20.0,
        ) {
            let out = soft_threshold_vector(&s, lambda);
            let expect = (norm(&s) - lambda).max(0.0);
            prop_assert!((norm(&out) - expect).abs() <= 1e-12 * (1.0 + norm(&s)));
        }
    }
}
