//! Run configuration shared by the command line and the experiment harness.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoding::VoxelSelection;
use crate::encoding::{FitConfig, ModelKind};
use crate::error::{Error, Result};

/// Named seeds; every random draw in a run derives from one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub stimuli: u64,
    pub population: u64,
    pub noise: u64,
    pub monte_carlo: u64,
    pub bold: u64,
    pub tuning: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            stimuli: 1,
            population: 2,
            noise: 3,
            monte_carlo: 4,
            bold: 5,
            tuning: 6,
        }
    }
}

impl Seeds {
    /// Derives every seed from one master value.
    pub fn from_master(master: u64) -> Self {
        let m = |i| crate::rng::mix(master, i);
        Self {
            stimuli: m(0),
            population: m(1),
            noise: m(2),
            monte_carlo: m(3),
            bold: m(4),
            tuning: m(5),
        }
    }
}

/// Model selection along the λ path. Only the BIC minimum is offered;
/// ties go to the smaller λ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BicRule {
    #[default]
    Minimum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoldConfig {
    pub n_images: usize,
    pub repeats: usize,
    /// Seconds between consecutive onsets.
    pub spacing: f64,
    pub sample_rate: f64,
    pub window: f64,
    pub n_fourier: usize,
    /// Seconds by which the simulated HRF lags the canonical shape.
    pub hrf_delay: f64,
    pub rho: f64,
    /// Amplitude sd over noise sd; 0 or less means noiseless.
    pub snr: f64,
    pub nuisance: [f64; 4],
    pub max_iter: usize,
    pub tol: f64,
    pub prewhiten: bool,
}

impl Default for BoldConfig {
    fn default() -> Self {
        Self {
            n_images: 30,
            repeats: 4,
            spacing: 4.0,
            sample_rate: 1.0,
            window: crate::bold::DEFAULT_WINDOW,
            n_fourier: crate::bold::DEFAULT_FOURIER,
            hrf_delay: 1.0,
            rho: 0.3,
            snr: 2.0,
            nuisance: [1.0, 0.5, -0.3, 0.2],
            max_iter: 100,
            tol: 1e-8,
            prewhiten: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub grid_size: usize,
    pub amplitude: f64,
    /// Grating frequencies in cycles per image.
    pub frequencies: Vec<f64>,
    pub n_orientations: usize,
    pub phase: f64,
    pub contrasts: Vec<f64>,
    pub n_noise: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            grid_size: 16,
            amplitude: 1.0,
            frequencies: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            n_orientations: 8,
            phase: 0.0,
            contrasts: (0..=10).map(|i| i as f64 / 10.0).collect(),
            n_noise: crate::tuning::DEFAULT_NOISE_PROBES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub image_size: usize,
    pub levels: usize,
    pub orientations: usize,
    pub aperture: bool,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_database: usize,
    pub n_voxels: usize,
    /// Predictive R² the true model would reach; sets the noise level.
    pub target_r2: f64,
    pub fit: FitConfig,
    pub bic_rule: BicRule,
    pub kinds: Vec<ModelKind>,
    pub loess_span: f64,
    pub selection: VoxelSelection,
    /// Training-R² thresholds for the selection sweep.
    pub threshold_sweep: Vec<f64>,
    /// Candidate-set sizes; `n_database` is always added.
    pub b_grid: Vec<usize>,
    /// Monte Carlo draws per pair for the cross-check; 0 disables it.
    pub mc_draws: usize,
    pub seeds: Seeds,
    pub bold: BoldConfig,
    pub tune: TuneConfig,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            levels: 6,
            orientations: 8,
            aperture: false,
            n_train: 1750,
            n_valid: 120,
            n_database: 2000,
            n_voxels: 50,
            target_r2: 0.5,
            fit: FitConfig::default(),
            bic_rule: BicRule::Minimum,
            kinds: ModelKind::ALL.to_vec(),
            loess_span: 0.75,
            selection: VoxelSelection::TopK(40),
            threshold_sweep: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            b_grid: vec![1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000],
            mc_draws: 0,
            seeds: Seeds::default(),
            bold: BoldConfig::default(),
            tune: TuneConfig::default(),
            out_dir: PathBuf::from("out"),
            jobs: 0,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn finite_pos(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(bad(format!("{name} must be positive and finite, got {v}")))
    }
}

impl BoldConfig {
    pub fn estimate_config(&self) -> crate::bold::EstimateConfig {
        crate::bold::EstimateConfig {
            window: self.window,
            n_fourier: self.n_fourier,
            max_iter: self.max_iter,
            tol: self.tol,
            prewhiten: self.prewhiten,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The b grid actually evaluated: sorted, deduplicated, capped at and
    /// always including the database size.
    pub fn effective_b_grid(&self) -> Vec<usize> {
        let mut g: Vec<usize> = self.b_grid.iter().copied().filter(|&b| b >= 1 && b <= self.n_database).collect();
        g.push(self.n_database);
        g.sort_unstable();
        g.dedup();
        g
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 8 || self.image_size > 1024 {
            return Err(bad(format!("image_size must be a power of two in [8, 1024], got {}", self.image_size)));
        }
        if self.levels == 0 || self.levels > 11 || (1usize << (self.levels - 1)) > self.image_size {
            return Err(bad(format!("levels must be in [1, log2(image_size)+1], got {}", self.levels)));
        }
        if self.orientations == 0 || self.orientations > 64 {
            return Err(bad(format!("orientations must be in [1, 64], got {}", self.orientations)));
        }
        if self.n_train < 50 {
            return Err(bad(format!("n_train must be >= 50, got {}", self.n_train)));
        }
        if self.n_valid < 3 {
            return Err(bad(format!("n_valid must be >= 3, got {}", self.n_valid)));
        }
        if self.n_database < 1 {
            return Err(bad("n_database must be >= 1"));
        }
        if self.n_voxels == 0 {
            return Err(bad("n_voxels must be >= 1"));
        }
        if !(self.target_r2 > 0.0 && self.target_r2 < 1.0) {
            return Err(bad(format!("target_r2 must lie in (0, 1), got {}", self.target_r2)));
        }
        if self.fit.screen_k == 0 {
            return Err(bad("screen_k must be >= 1"));
        }
        if !(self.fit.target_df > 1.0 && self.fit.target_df.is_finite()) {
            return Err(bad(format!("target_df must exceed 1, got {}", self.fit.target_df)));
        }
        if self.fit.n_lambda == 0 {
            return Err(bad("n_lambda must be >= 1"));
        }
        if !(self.fit.lambda_ratio > 0.0 && self.fit.lambda_ratio < 1.0) {
            return Err(bad(format!("lambda_ratio must lie in (0, 1), got {}", self.fit.lambda_ratio)));
        }
        if self.kinds.is_empty() {
            return Err(bad("kinds must not be empty"));
        }
        if !(self.loess_span > 0.0 && self.loess_span <= 1.0) {
            return Err(bad(format!("loess_span must lie in (0, 1], got {}", self.loess_span)));
        }
        match self.selection {
            VoxelSelection::TopK(k) if k == 0 || k > self.n_voxels => {
                return Err(bad(format!("top_k must lie in [1, n_voxels], got {k}")));
            }
            VoxelSelection::Threshold(a) if !a.is_finite() => return Err(bad("selection threshold must be finite")),
            _ => {}
        }
        if self.threshold_sweep.iter().any(|a| !a.is_finite()) {
            return Err(bad("threshold_sweep values must be finite"));
        }
        if self.b_grid.iter().any(|&b| b == 0 || b > self.n_database) {
            return Err(bad(format!("b_grid values must lie in [1, {}]", self.n_database)));
        }
        let b = &self.bold;
        if b.n_images == 0 || b.repeats == 0 {
            return Err(bad("bold.n_images and bold.repeats must be >= 1"));
        }
        finite_pos("bold.spacing", b.spacing)?;
        finite_pos("bold.sample_rate", b.sample_rate)?;
        finite_pos("bold.window", b.window)?;
        if b.n_fourier == 0 {
            return Err(bad("bold.n_fourier must be >= 1"));
        }
        if !(b.hrf_delay.is_finite() && b.hrf_delay >= 0.0 && b.hrf_delay < b.window) {
            return Err(bad(format!("bold.hrf_delay must lie in [0, window), got {}", b.hrf_delay)));
        }
        if !(b.rho.abs() < 1.0) {
            return Err(bad(format!("bold.rho must lie in (-1, 1), got {}", b.rho)));
        }
        if !b.snr.is_finite() || b.nuisance.iter().any(|v| !v.is_finite()) {
            return Err(bad("bold.snr and bold.nuisance must be finite"));
        }
        if b.max_iter == 0 {
            return Err(bad("bold.max_iter must be >= 1"));
        }
        finite_pos("bold.tol", b.tol)?;
        let t = &self.tune;
        if t.grid_size < 2 || t.grid_size > self.image_size {
            return Err(bad(format!("tune.grid_size must lie in [2, image_size], got {}", t.grid_size)));
        }
        let nyquist = self.image_size as f64 / 2.0;
        if t.frequencies.is_empty() || t.frequencies.iter().any(|f| !(f.is_finite() && *f > 0.0 && *f <= nyquist)) {
            return Err(bad(format!("tune.frequencies must be non-empty and in (0, {nyquist}]")));
        }
        if t.n_orientations == 0 || t.contrasts.is_empty() || t.n_noise == 0 {
            return Err(bad("tune.n_orientations, tune.contrasts and tune.n_noise must be non-empty"));
        }
        if t.contrasts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(bad("tune.contrasts must be non-negative"));
        }
        Ok(())
    }
}
