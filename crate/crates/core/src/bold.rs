//! Scanner time-series model `Z = B + N + ε`: an event-driven linear
//! time-invariant BOLD response, a cubic polynomial drift and AR(1) noise.
//! Per-image amplitudes and the HRF are estimated jointly by alternating
//! least squares.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::rng;

pub const DEFAULT_WINDOW: f64 = 16.0;
pub const DEFAULT_FOURIER: usize = 9;
pub const POLY_DEGREE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSchedule {
    pub n_images: usize,
    /// Onset times in seconds, one list per image.
    pub onsets: Vec<Vec<f64>>,
    pub duration: f64,
    pub sample_rate: f64,
}

impl EventSchedule {
    pub fn new(onsets: Vec<Vec<f64>>, duration: f64, sample_rate: f64) -> Result<Self> {
        let s = Self {
            n_images: onsets.len(),
            onsets,
            duration,
            sample_rate,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(invalid_arg(format!("sample rate must be > 0, got {}", self.sample_rate)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(invalid_arg(format!("duration must be > 0, got {}", self.duration)));
        }
        if self.onsets.len() != self.n_images {
            return Err(invalid_arg(format!(
                "{} onset lists for {} images",
                self.onsets.len(),
                self.n_images
            )));
        }
        for (k, list) in self.onsets.iter().enumerate() {
            if let Some(t) = list.iter().find(|t| !(**t >= 0.0 && **t < self.duration)) {
                return Err(invalid_arg(format!("image {k} onset {t} outside [0, {})", self.duration)));
            }
            if self.onset_samples(k).iter().any(|&i| i >= self.n_samples()) {
                return Err(invalid_arg(format!("image {k} has an onset past the last sample")));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    /// Onsets of image `k` snapped to the sample grid.
    pub fn onset_samples(&self, k: usize) -> Vec<usize> {
        self.onsets[k]
            .iter()
            .map(|t| (t * self.sample_rate).round() as usize)
            .collect()
    }

    /// Each image shown `repeats` times in random order, one onset every
    /// `spacing` seconds, with a trailing window for the last response.
    pub fn generate(n_images: usize, repeats: usize, spacing: f64, sample_rate: f64, seed: u64) -> Result<Self> {
        if n_images == 0 || repeats == 0 {
            return Err(invalid_arg("schedule needs at least one image and one repeat"));
        }
        if !(spacing > 0.0) {
            return Err(invalid_arg("spacing must be > 0"));
        }
        let mut order: Vec<usize> = (0..n_images).flat_map(|k| std::iter::repeat(k).take(repeats)).collect();
        order.shuffle(&mut rng::stream(seed, 0));
        let mut onsets = vec![Vec::with_capacity(repeats); n_images];
        for (slot, &k) in order.iter().enumerate() {
            onsets[k].push(slot as f64 * spacing);
        }
        let duration = order.len() as f64 * spacing + DEFAULT_WINDOW;
        Self::new(onsets, duration, sample_rate)
    }

    /// `n x K` count of onsets of each image at each sample.
    fn event_matrix(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n_samples(), self.n_images);
        for k in 0..self.n_images {
            for i in self.onset_samples(k) {
                e[(i, k)] += 1.0;
            }
        }
        e
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sched: Self = serde_json::from_str(s)?;
        sched.validate()?;
        Ok(sched)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrfSpec {
    pub window: f64,
    pub n_fourier: usize,
    pub coefficients: Vec<f64>,
}

/// Samples of the HRF window at `rate`: lags `0, 1/rate, ...` below `window`.
pub fn lag_count(window: f64, rate: f64) -> usize {
    (window * rate).ceil() as usize
}

/// `L x F` basis: a constant, then `sin` and `cos` at periods `window / q`.
pub fn fourier_basis(window: f64, n_fourier: usize, rate: f64) -> DMatrix<f64> {
    let lags = lag_count(window, rate);
    DMatrix::from_fn(lags, n_fourier, |l, f| {
        let t = l as f64 / rate;
        if f == 0 {
            return 1.0;
        }
        let q = ((f + 1) / 2) as f64;
        let arg = 2.0 * PI * q * t / window;
        if f % 2 == 1 { arg.sin() } else { arg.cos() }
    })
}

/// Double-gamma response with peak near 5 s and a late undershoot.
pub fn canonical_shape(t: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let g = |shape: f64| (shape - 1.0) * t.ln() - t - statrs::function::gamma::ln_gamma(shape);
    if t == 0.0 {
        return 0.0;
    }
    g(6.0).exp() - g(16.0).exp() / 6.0
}

impl HrfSpec {
    pub fn new(window: f64, coefficients: Vec<f64>) -> Result<Self> {
        let spec = Self {
            window,
            n_fourier: coefficients.len(),
            coefficients,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err(invalid_arg(format!("HRF window must be > 0, got {}", self.window)));
        }
        if self.n_fourier == 0 || self.coefficients.len() != self.n_fourier {
            return Err(invalid_arg("HRF needs n_fourier >= 1 matching coefficients"));
        }
        if self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(invalid_arg("HRF coefficients must be finite"));
        }
        Ok(())
    }

    /// Least-squares projection of the double-gamma shape onto the basis,
    /// normalized.
    pub fn canonical(window: f64, n_fourier: usize, rate: f64) -> Result<Self> {
        Self::from_shape(window, n_fourier, rate, canonical_shape)
    }

    /// Least-squares projection of `shape(t)` sampled at `rate`, normalized.
    pub fn from_shape(window: f64, n_fourier: usize, rate: f64, shape: impl Fn(f64) -> f64) -> Result<Self> {
        check_basis(window, n_fourier, rate)?;
        let phi = fourier_basis(window, n_fourier, rate);
        let target = DVector::from_fn(phi.nrows(), |l, _| shape(l as f64 / rate));
        let c = least_squares(&phi, &target)?;
        Ok(Self::new(window, c.iter().copied().collect())?.normalized().0)
    }

    pub fn sample(&self, rate: f64) -> Vec<f64> {
        let phi = fourier_basis(self.window, self.n_fourier, rate);
        (&phi * DVector::from_column_slice(&self.coefficients)).iter().copied().collect()
    }

    /// Unit-norm coefficients with a nonnegative sampled peak (at 1 Hz), and
    /// the factor `s` with `self = s · normalized`.
    pub fn normalized(&self) -> (Self, f64) {
        let norm = self.coefficients.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (self.clone(), 1.0);
        }
        let peak = self
            .sample(1.0)
            .into_iter()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let s = if peak < 0.0 { -norm } else { norm };
        let coefficients = self.coefficients.iter().map(|c| c / s).collect();
        (
            Self {
                window: self.window,
                n_fourier: self.n_fourier,
                coefficients,
            },
            s,
        )
    }
}

fn check_basis(window: f64, n_fourier: usize, rate: f64) -> Result<()> {
    if !(window > 0.0) || n_fourier == 0 || !(rate > 0.0) {
        return Err(invalid_arg("HRF basis needs window > 0, n_fourier >= 1, rate > 0"));
    }
    let q_max = (n_fourier / 2) as f64;
    if q_max / window >= rate / 2.0 {
        return Err(invalid_arg(format!(
            "{n_fourier} Fourier terms over {window} s exceed the Nyquist rate at {rate} Hz"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoldTruth {
    pub amplitudes: Vec<f64>,
    pub hrf: HrfSpec,
    pub nuisance: Vec<f64>,
    pub rho: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoldSeries {
    pub samples: Vec<f64>,
    pub truth: Option<BoldTruth>,
}

/// Normalized time `u ∈ [−1, 1]` powers `u⁰ … u³`, `n x 4`.
fn polynomial_design(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, POLY_DEGREE + 1, |i, d| {
        let u = if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
        u.powi(d as i32)
    })
}

/// Causal convolution of an event train with a kernel, truncated to `n`.
fn convolve(events: impl Iterator<Item = f64>, kernel: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, e) in events.enumerate() {
        if e != 0.0 {
            for (l, h) in kernel.iter().enumerate() {
                if i + l >= n {
                    break;
                }
                out[i + l] += e * h;
            }
        }
    }
    out
}

/// `Z(t) = Σ_k Σ_{τ∈T_k} A_k h(t − τ) + Σ_d γ_d u(t)^d + ε(t)` with AR(1)
/// noise whose stationary standard deviation is `noise_sd`.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    schedule: &EventSchedule,
    amplitudes: &[f64],
    hrf: &HrfSpec,
    nuisance: &[f64],
    rho: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<BoldSeries> {
    schedule.validate()?;
    hrf.validate()?;
    if !(rho.abs() < 1.0) {
        return Err(invalid_arg(format!("AR coefficient must satisfy |rho| < 1, got {rho}")));
    }
    if !(noise_sd >= 0.0) {
        return Err(invalid_arg(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    if amplitudes.len() != schedule.n_images {
        return Err(invalid_arg(format!(
            "{} amplitudes for {} images",
            amplitudes.len(),
            schedule.n_images
        )));
    }
    if nuisance.len() != POLY_DEGREE + 1 {
        return Err(invalid_arg(format!("nuisance needs {} coefficients", POLY_DEGREE + 1)));
    }
    check_basis(hrf.window, hrf.n_fourier, schedule.sample_rate)?;
    let n = schedule.n_samples();
    let h = hrf.sample(schedule.sample_rate);
    let mut z = vec![0.0; n];
    for (k, &a) in amplitudes.iter().enumerate() {
        for s in schedule.onset_samples(k) {
            for (l, hv) in h.iter().enumerate() {
                if s + l >= n {
                    break;
                }
                z[s + l] += a * hv;
            }
        }
    }
    let poly = polynomial_design(n);
    for (i, zi) in z.iter_mut().enumerate() {
        *zi += (0..=POLY_DEGREE).map(|d| nuisance[d] * poly[(i, d)]).sum::<f64>();
    }
    if noise_sd > 0.0 {
        let mut r = rng::stream(seed, 0);
        let innovation = Normal::new(0.0, noise_sd * (1.0 - rho * rho).sqrt()).map_err(|e| invalid_arg(e.to_string()))?;
        let initial = Normal::new(0.0, noise_sd).map_err(|e| invalid_arg(e.to_string()))?;
        let mut eps = initial.sample(&mut r);
        for (i, zi) in z.iter_mut().enumerate() {
            if i > 0 {
                eps = rho * eps + innovation.sample(&mut r);
            }
            *zi += eps;
        }
    }
    Ok(BoldSeries {
        samples: z,
        truth: Some(BoldTruth {
            amplitudes: amplitudes.to_vec(),
            hrf: hrf.clone(),
            nuisance: nuisance.to_vec(),
            rho,
            noise_sd,
            seed,
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    pub window: f64,
    pub n_fourier: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// One Cochrane-Orcutt step using the lag-1 residual autocorrelation.
    pub prewhiten: bool,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            n_fourier: DEFAULT_FOURIER,
            max_iter: 100,
            tol: 1e-8,
            prewhiten: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeFit {
    pub amplitudes: Vec<f64>,
    pub hrf: HrfSpec,
    pub nuisance: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// RSS after every half-step, in order.
    pub rss_trace: Vec<f64>,
    pub rss: f64,
    /// Lag-1 residual autocorrelation used for prewhitening.
    pub rho_hat: Option<f64>,
}

impl AmplitudeFit {
    /// Model prediction on the schedule's sample grid.
    pub fn reconstruct(&self, schedule: &EventSchedule) -> Result<Vec<f64>> {
        let mut s = simulate(schedule, &self.amplitudes, &self.hrf, &self.nuisance, 0.0, 0.0, 0)?;
        s.truth = None;
        Ok(s.samples)
    }
}

/// Least squares through the SVD; a numerically rank-deficient design is an
/// error rather than a minimum-norm solution.
fn least_squares(design: &DMatrix<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= 1e-10 * smax {
        return Err(Error::SingularDesign(format!(
            "design of {} columns has condition {:.3e}",
            design.ncols(),
            smax / smin
        )));
    }
    svd.solve(z, 0.0).map_err(|e| Error::SingularDesign(e.to_string()))
}

/// Cochrane-Orcutt transform `v_t − ρ v_{t−1}`, dropping the first sample.
fn whiten_columns(m: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows() - 1, m.ncols(), |i, j| m[(i + 1, j)] - rho * m[(i, j)])
}

struct Als<'a> {
    events: &'a DMatrix<f64>,
    phi: &'a DMatrix<f64>,
    poly: &'a DMatrix<f64>,
    rho: Option<f64>,
}

impl Als<'_> {
    fn n(&self) -> usize {
        self.events.nrows()
    }

    fn finish(&self, d: DMatrix<f64>) -> DMatrix<f64> {
        match self.rho {
            Some(r) => whiten_columns(&d, r),
            None => d,
        }
    }

    /// Columns `e_k * h` followed by the polynomial.
    fn amplitude_design(&self, h: &[f64]) -> DMatrix<f64> {
        let (n, k) = (self.n(), self.events.ncols());
        let mut d = DMatrix::zeros(n, k + self.poly.ncols());
        for j in 0..k {
            let col = convolve(self.events.column(j).iter().copied(), h, n);
            d.column_mut(j).copy_from_slice(&col);
        }
        d.columns_mut(k, self.poly.ncols()).copy_from(self.poly);
        self.finish(d)
    }

    /// Columns `(Σ_k A_k e_k) * φ_f` followed by the polynomial.
    fn hrf_design(&self, amplitudes: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let drive = self.events * DVector::from_column_slice(amplitudes);
        let f = self.phi.ncols();
        let mut d = DMatrix::zeros(n, f + self.poly.ncols());
        for j in 0..f {
            let basis: Vec<f64> = self.phi.column(j).iter().copied().collect();
            let col = convolve(drive.iter().copied(), &basis, n);
            d.column_mut(j).copy_from_slice(&col);
        }
        d.columns_mut(f, self.poly.ncols()).copy_from(self.poly);
        self.finish(d)
    }

    fn target(&self, z: &[f64]) -> DVector<f64> {
        let v = DMatrix::from_column_slice(z.len(), 1, z);
        DVector::from_column_slice(self.finish(v).as_slice())
    }
}

fn rss_of(design: &DMatrix<f64>, coef: &DVector<f64>, z: &DVector<f64>) -> f64 {
    (z - design * coef).norm_squared()
}

struct AlsState {
    coefficients: Vec<f64>,
    amplitudes: Vec<f64>,
    nuisance: Vec<f64>,
    rss: f64,
    iterations: usize,
    converged: bool,
}

fn run_als(
    als: &Als<'_>,
    z: &[f64],
    mut coefficients: Vec<f64>,
    config: &EstimateConfig,
    trace: &mut Vec<f64>,
) -> Result<AlsState> {
    let target = als.target(z);
    let scale = target.norm_squared().max(f64::MIN_POSITIVE);
    let k = als.events.ncols();
    let mut amplitudes = vec![0.0; k];
    let mut nuisance = vec![0.0; POLY_DEGREE + 1];
    let mut prev = f64::INFINITY;
    let mut rss = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        iterations += 1;
        let h: Vec<f64> = (als.phi * DVector::from_column_slice(&coefficients)).iter().copied().collect();
        let da = als.amplitude_design(&h);
        let sol = least_squares(&da, &target)?;
        trace.push(rss_of(&da, &sol, &target));
        amplitudes = sol.rows(0, k).iter().copied().collect();
        // Without a detectable response the HRF is not identified; keep it.
        let peak_h = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let peak_a = amplitudes.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak_a * peak_h <= 1e-10 * (scale / target.len() as f64).sqrt() {
            nuisance = sol.rows(k, POLY_DEGREE + 1).iter().copied().collect();
            rss = trace[trace.len() - 1];
            converged = true;
            break;
        }

        let dh = als.hrf_design(&amplitudes);
        let sol = least_squares(&dh, &target)?;
        rss = rss_of(&dh, &sol, &target);
        trace.push(rss);
        let f = coefficients.len();
        let spec = HrfSpec::new(config.window, sol.rows(0, f).iter().copied().collect())?;
        let (unit, s) = spec.normalized();
        coefficients = unit.coefficients;
        amplitudes.iter_mut().for_each(|a| *a *= s);
        nuisance = sol.rows(f, POLY_DEGREE + 1).iter().copied().collect();

        if (prev.is_finite() && (prev - rss).abs() <= config.tol * prev) || rss <= 1e-24 * scale {
            converged = true;
            break;
        }
        prev = rss;
    }
    Ok(AlsState {
        coefficients,
        amplitudes,
        nuisance,
        rss,
        iterations,
        converged,
    })
}

/// Alternating least squares for amplitudes, HRF and drift, started from
/// the canonical HRF.
pub fn estimate(series: &[f64], schedule: &EventSchedule, config: &EstimateConfig) -> Result<AmplitudeFit> {
    schedule.validate()?;
    check_basis(config.window, config.n_fourier, schedule.sample_rate)?;
    let n = schedule.n_samples();
    if series.len() != n {
        return Err(invalid_arg(format!("series has {} samples, schedule implies {n}", series.len())));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(invalid_arg("series must be finite"));
    }
    if n <= schedule.n_images + config.n_fourier + POLY_DEGREE + 1 {
        return Err(invalid_arg(format!(
            "{n} samples are too few for {} images and {} HRF terms",
            schedule.n_images, config.n_fourier
        )));
    }
    if config.max_iter == 0 {
        return Err(Error::InvalidConfig("max_iter must be >= 1".into()));
    }
    let events = schedule.event_matrix();
    let phi = fourier_basis(config.window, config.n_fourier, schedule.sample_rate);
    let poly = polynomial_design(n);
    let init = HrfSpec::canonical(config.window, config.n_fourier, schedule.sample_rate)?.coefficients;

    let mut trace = Vec::new();
    let ols = Als {
        events: &events,
        phi: &phi,
        poly: &poly,
        rho: None,
    };
    let mut state = run_als(&ols, series, init, config, &mut trace)?;
    let mut rho_hat = None;
    if config.prewhiten {
        let fitted = AmplitudeFit {
            amplitudes: state.amplitudes.clone(),
            hrf: HrfSpec::new(config.window, state.coefficients.clone())?,
            nuisance: state.nuisance.clone(),
            converged: state.converged,
            iterations: state.iterations,
            rss_trace: Vec::new(),
            rss: state.rss,
            rho_hat: None,
        }
        .reconstruct(schedule)?;
        let resid: Vec<f64> = series.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let num: f64 = resid.windows(2).map(|w| w[0] * w[1]).sum();
        let den: f64 = resid.iter().map(|r| r * r).sum();
        let rho = if den > 0.0 { (num / den).clamp(-0.99, 0.99) } else { 0.0 };
        let whitened = Als {
            events: &events,
            phi: &phi,
            poly: &poly,
            rho: Some(rho),
        };
        // The whitened problem has its own RSS scale; its trace restarts.
        trace.clear();
        let iterations = state.iterations;
        state = run_als(&whitened, series, state.coefficients, config, &mut trace)?;
        state.iterations += iterations;
        rho_hat = Some(rho);
    }
    Ok(AmplitudeFit {
        amplitudes: state.amplitudes,
        hrf: HrfSpec::new(config.window, state.coefficients)?,
        nuisance: state.nuisance,
        converged: state.converged,
        iterations: state.iterations,
        rss_trace: trace,
        rss: state.rss,
        rho_hat,
    })
}

/// Pearson correlation; 0 when either side is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n_images: usize, seed: u64) -> (EventSchedule, Vec<f64>, HrfSpec) {
        let sched = EventSchedule::generate(n_images, 3, 4.0, 1.0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amps = (0..n_images).map(|_| rng.gen_range(-1.0..2.0)).collect();
        (sched, amps, HrfSpec::canonical(16.0, 9, 1.0).unwrap())
    }

    #[test]
    fn zero_inputs_give_zero_series() {
        let (sched, _, hrf) = setup(5, 1);
        let s = simulate(&sched, &[0.0; 5], &hrf, &[0.0; 4], 0.3, 0.0, 1).unwrap();
        assert!(s.samples.iter().all(|&v| v == 0.0));
        assert!(simulate(&sched, &[0.0; 5], &hrf, &[0.0; 4], 1.0, 0.0, 1).is_err());
    }

    #[test]
    fn single_event_reproduces_the_hrf() {
        let sched = EventSchedule::new(vec![vec![3.0]], 40.0, 1.0).unwrap();
        let hrf = HrfSpec::canonical(16.0, 9, 1.0).unwrap();
        let s = simulate(&sched, &[2.5], &hrf, &[0.0; 4], 0.0, 0.0, 0).unwrap();
        let h = hrf.sample(1.0);
        for (l, hv) in h.iter().enumerate() {
            assert!((s.samples[3 + l] - 2.5 * hv).abs() < 1e-15);
        }
        assert!(s.samples[..3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ar1_noise_autocorrelation() {
        let sched = EventSchedule::new(vec![vec![0.0]], 10_000.0, 1.0).unwrap();
        let hrf = HrfSpec::canonical(16.0, 9, 1.0).unwrap();
        let s = simulate(&sched, &[0.0], &hrf, &[0.0; 4], 0.6, 1.5, 42).unwrap();
        let z = &s.samples;
        let r1 = correlation(&z[1..], &z[..z.len() - 1]);
        assert!((r1 - 0.6).abs() < 0.05, "lag-1 autocorrelation {r1}");
        let sd = (z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64).sqrt();
        assert!((sd - 1.5).abs() < 0.1);
    }

    #[test]
    fn noiseless_round_trip_and_scale_ambiguity() {
        let (sched, amps, hrf) = setup(20, 3);
        let nuis = [0.5, -0.2, 0.1, 0.05];
        let s = simulate(&sched, &amps, &hrf, &nuis, 0.0, 0.0, 0).unwrap();
        let fit = estimate(&s.samples, &sched, &EstimateConfig::default()).unwrap();
        assert!(correlation(&fit.amplitudes, &amps) > 0.999);
        assert!(correlation(&fit.hrf.sample(1.0), &hrf.sample(1.0)) > 0.999);
        assert!(fit.rss_trace.windows(2).all(|w| w[1] <= w[0] + 1e-10 * w[0].max(1.0)));
        let norm: f64 = fit.hrf.coefficients.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);

        let doubled_hrf = HrfSpec::new(16.0, hrf.coefficients.iter().map(|c| 2.0 * c).collect()).unwrap();
        let halved: Vec<f64> = amps.iter().map(|a| a / 2.0).collect();
        let s2 = simulate(&sched, &halved, &doubled_hrf, &nuis, 0.0, 0.0, 0).unwrap();
        assert_eq!(s.samples, s2.samples);

        let recon = fit.reconstruct(&sched).unwrap();
        let again = estimate(&recon, &sched, &EstimateConfig::default()).unwrap();
        for (a, b) in again.amplitudes.iter().zip(&fit.amplitudes) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_amplitudes_and_linearity() {
        let (sched, amps, hrf) = setup(10, 4);
        let s = simulate(&sched, &[0.0; 10], &hrf, &[1.0, 0.2, 0.0, 0.0], 0.0, 0.0, 0).unwrap();
        let fit = estimate(&s.samples, &sched, &EstimateConfig::default()).unwrap();
        assert!(fit.amplitudes.iter().all(|a| a.abs() < 1e-8), "{:?}", fit.amplitudes);

        let one = simulate(&sched, &amps, &hrf, &[0.0; 4], 0.0, 0.0, 0).unwrap();
        let two: Vec<f64> = amps.iter().map(|a| 2.0 * a).collect();
        let two = simulate(&sched, &two, &hrf, &[0.0; 4], 0.0, 0.0, 0).unwrap();
        let f1 = estimate(&one.samples, &sched, &EstimateConfig::default()).unwrap();
        let f2 = estimate(&two.samples, &sched, &EstimateConfig::default()).unwrap();
        for (a, b) in f1.amplitudes.iter().zip(&f2.amplitudes) {
            assert!((b - 2.0 * a).abs() <= 1e-8 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn singular_design_is_reported() {
        let sched = EventSchedule::new(vec![vec![0.0, 20.0], vec![0.0, 20.0]], 60.0, 1.0).unwrap();
        let hrf = HrfSpec::canonical(16.0, 9, 1.0).unwrap();
        let s = simulate(&sched, &[1.0, 1.0], &hrf, &[0.0; 4], 0.0, 0.0, 0).unwrap();
        assert!(matches!(
            estimate(&s.samples, &sched, &EstimateConfig::default()),
            Err(Error::SingularDesign(_))
        ));
    }

    #[test]
    fn prewhitening_runs_and_reports_rho() {
        let (sched, amps, hrf) = setup(15, 5);
        let s = simulate(&sched, &amps, &hrf, &[0.0; 4], 0.5, 0.3, 9).unwrap();
        let cfg = EstimateConfig {
            prewhiten: true,
            ..EstimateConfig::default()
        };
        let fit = estimate(&s.samples, &sched, &cfg).unwrap();
        let rho = fit.rho_hat.unwrap();
        assert!(rho > 0.2 && rho < 0.8, "rho_hat {rho}");
        assert!(correlation(&fit.amplitudes, &amps) > 0.9);
    }

    #[test]
    fn schedule_json_round_trip() {
        let (sched, _, _) = setup(7, 6);
        assert_eq!(EventSchedule::from_json(&sched.to_json().unwrap()).unwrap(), sched);
        assert!(EventSchedule::new(vec![vec![50.0]], 40.0, 1.0).is_err());
    }
}
