//! End-to-end synthetic experiment: stimuli, a voxel population with
//! saturating ground truth, encoding fits per model kind, and
//! identification.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bold::{canonical_shape, simulate, BoldSeries, EventSchedule, HrfSpec};
use crate::config::{BoldConfig, RunConfig};
use crate::decoding::{mc_from_table, select_voxels, Decoder, IdentificationResult, McEstimate, ScoreTable, ValidationSet, VoxelSelection};
use crate::encoding::{
    fit_transformed, generate_population_stream, median, predict, predictive_r2, residual_diagnostic, EncodingReport,
    FitConfig, FunctionFamily, ModelKind, ReportRow, SyntheticVoxelSpec, VoxelFit, VoxelModel,
};
use crate::error::{invalid_arg, Error, Result};
use crate::gabor::{build_bank, featurize_set, transform_features, FeatureMatrix, GaborBank, Transform};
use crate::rng;
use crate::stimuli::sample_stimulus_set;

/// Noise streams for training and validation responses.
pub const TRAIN_STREAM: u64 = 0;
pub const VALID_STREAM: u64 = 1;

/// Saturation scale of a ground-truth function as a fraction of the median
/// transformed feature value.
pub const SATURATION_FRACTION: f64 = 0.5;

/// Raw features for the three stimulus sets of a run.
#[derive(Debug, Clone)]
pub struct Features {
    pub train: FeatureMatrix,
    pub valid: FeatureMatrix,
    pub database: FeatureMatrix,
}

pub fn build_run_bank(cfg: &RunConfig) -> Result<GaborBank> {
    build_bank(cfg.image_size, cfg.levels, cfg.orientations)
}

/// Sub-seeds of `seeds.stimuli` for the train, validation and database sets.
pub fn stimulus_seeds(cfg: &RunConfig) -> [u64; 3] {
    [0, 1, 2].map(|i| rng::mix(cfg.seeds.stimuli, i))
}

pub fn generate_features(cfg: &RunConfig, bank: &GaborBank) -> Result<Features> {
    let [s_train, s_valid, s_db] = stimulus_seeds(cfg);
    let set = |n, s| -> Result<FeatureMatrix> {
        featurize_set(bank, &sample_stimulus_set(cfg.image_size, n, s, cfg.aperture)?)
    };
    Ok(Features {
        train: set(cfg.n_train, s_train)?,
        valid: set(cfg.n_valid, s_valid)?,
        database: set(cfg.n_database, s_db)?,
    })
}

/// Position of wavelet `(level, row, col, orientation)` in the bank.
pub fn wavelet_index(bank: &GaborBank, level: usize, row: usize, col: usize, orientation: usize) -> usize {
    let o = bank.orientations;
    let offset: usize = (0..level).map(|l| o << (2 * l)).sum();
    offset + ((row << level) + col) * o + orientation
}

/// Levels voxels draw their receptive fields from: mid scales where a cell
/// covers several pixels but is smaller than a quadrant.
fn voxel_levels(levels: usize) -> Vec<usize> {
    let mid: Vec<usize> = (2..levels.saturating_sub(1)).take(3).collect();
    if !mid.is_empty() {
        mid
    } else {
        (0..levels).collect()
    }
}

/// Each voxel pools a few wavelets at one location: the chosen orientation,
/// its two neighbours and the coarser parent. Every pooled feature passes
/// through `a·tanh(x / c)` on `x = log(1 + √X)`, with `c` a fixed fraction
/// of the feature's training median. The noise sd is set so the true model
/// would reach `target_r2` on the training set.
pub fn design_population(cfg: &RunConfig, bank: &GaborBank, train: &FeatureMatrix) -> Result<Vec<SyntheticVoxelSpec>> {
    if train.transform != Transform::Raw || train.bank_hash != bank.hash() {
        return Err(invalid_arg("population design needs raw features of the run bank"));
    }
    let mut rng = rng::stream(cfg.seeds.population, 0);
    let levels = voxel_levels(bank.levels);
    let o = bank.orientations;
    let mut medians: std::collections::HashMap<usize, f64> = Default::default();
    (0..cfg.n_voxels)
        .map(|v| {
            let level = levels[rng.gen_range(0..levels.len())];
            let grid = 1usize << level;
            let (r, c, k) = (rng.gen_range(0..grid), rng.gen_range(0..grid), rng.gen_range(0..o));
            let mut active = vec![
                wavelet_index(bank, level, r, c, k),
                wavelet_index(bank, level, r, c, (k + 1) % o),
                wavelet_index(bank, level, r, c, (k + o - 1) % o),
            ];
            if level > 0 {
                active.push(wavelet_index(bank, level - 1, r / 2, c / 2, k));
            }
            let mut seen = std::collections::BTreeSet::new();
            active.retain(|j| seen.insert(*j));
            let families = active
                .iter()
                .map(|&j| {
                    let m = *medians.entry(j).or_insert_with(|| {
                        median((0..train.n()).map(|i| Transform::Log1pSqrt.apply(train.values[(i, j)])).collect())
                            .unwrap_or(0.0)
                    });
                    FunctionFamily::Saturating {
                        scale: (SATURATION_FRACTION * m).max(1e-12),
                    }
                })
                .collect::<Vec<_>>();
            let amplitudes = active.iter().map(|_| rng.gen_range(0.5..1.5)).collect();
            let mut spec = SyntheticVoxelSpec {
                active,
                families,
                amplitudes,
                intercept: 0.0,
                noise_sd: 0.0,
                seed: rng::mix(cfg.seeds.noise, v as u64),
            };
            let s = spec.signal(train)?;
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let sd = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
            spec.noise_sd = sd * ((1.0 - cfg.target_r2) / cfg.target_r2).sqrt();
            Ok(spec)
        })
        .collect()
}

/// Training and validation responses (`n × voxels`) with independent noise.
pub fn sample_responses(specs: &[SyntheticVoxelSpec], features: &Features) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok((
        generate_population_stream(specs, &features.train, TRAIN_STREAM)?,
        generate_population_stream(specs, &features.valid, VALID_STREAM)?,
    ))
}

/// Fits every voxel column of `y` with one model kind. The feature
/// transform is computed once; voxels run on the current rayon pool and
/// results come back in voxel order.
pub fn fit_population(train: &FeatureMatrix, y: &DMatrix<f64>, kind: ModelKind, fit: &FitConfig) -> Result<Vec<Result<VoxelFit>>> {
    if y.nrows() != train.n() {
        return Err(invalid_arg(format!("{} response rows for {} training images", y.nrows(), train.n())));
    }
    let transformed = transform_features(train, kind.transform())?;
    Ok((0..y.ncols())
        .into_par_iter()
        .map(|v| {
            let col: Vec<f64> = y.column(v).iter().copied().collect();
            fit_transformed(&transformed, &col, kind, fit)
        })
        .collect())
}

/// Per-voxel train/predictive R², df and residual LOESS range for each
/// fitted kind.
pub fn encoding_report(
    fits: &[(ModelKind, Vec<VoxelModel>)],
    train: &FeatureMatrix,
    valid: &FeatureMatrix,
    y_train: &DMatrix<f64>,
    y_valid: &DMatrix<f64>,
    loess_span: f64,
) -> Result<EncodingReport> {
    let voxels = y_train.ncols();
    if fits.iter().any(|(_, m)| m.len() != voxels) || y_valid.ncols() != voxels {
        return Err(invalid_arg("every kind needs one model per voxel"));
    }
    let cells = fits
        .iter()
        .map(|(_, models)| {
            models
                .par_iter()
                .enumerate()
                .map(|(v, m)| {
                    let yt: Vec<f64> = y_train.column(v).iter().copied().collect();
                    let yv: Vec<f64> = y_valid.column(v).iter().copied().collect();
                    let pred = predict(m, valid)?;
                    let r2 = predictive_r2(&pred, &yv)?;
                    let diag = residual_diagnostic(m, train, &yt, loess_span)?;
                    Ok((m.train_r2, r2, m.df, diag.loess_range()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = (0..voxels)
        .map(|v| ReportRow {
            voxel: v,
            train_r2: cells.iter().map(|c| c[v].0).collect(),
            pred_r2: cells.iter().map(|c| c[v].1).collect(),
            df: cells.iter().map(|c| c[v].2).collect(),
            loess_range: cells.iter().map(|c| c[v].3).collect(),
        })
        .collect();
    Ok(EncodingReport {
        kinds: fits.iter().map(|f| f.0).collect(),
        rows,
    })
}

#[derive(Debug, Clone)]
pub struct Identification {
    pub selected: Vec<usize>,
    pub table: ScoreTable,
    pub result: IdentificationResult,
}

pub fn identify(
    models: &[VoxelModel],
    selection: VoxelSelection,
    validation: &ValidationSet,
    database: &FeatureMatrix,
    b_grid: &[usize],
) -> Result<Identification> {
    let selected = select_voxels(models, selection)?;
    let decoder = Decoder::new(models.to_vec(), selected.clone())?;
    let table = ScoreTable::build(&decoder, validation, database)?;
    let result = IdentificationResult::from_beat_counts(table.beat_counts(), database.n(), b_grid)?;
    Ok(Identification { selected, table, result })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub n_selected: usize,
    /// Error at `b = N`; `None` when no voxel passes.
    pub error_at_n: Option<f64>,
}

/// Identification error at `b = N` as the training-R² threshold varies.
pub fn threshold_sweep(
    models: &[VoxelModel],
    thresholds: &[f64],
    validation: &ValidationSet,
    database: &FeatureMatrix,
) -> Result<Vec<SweepRow>> {
    let n = database.n();
    thresholds
        .iter()
        .map(|&a| match identify(models, VoxelSelection::Threshold(a), validation, database, &[n]) {
            Ok(id) => Ok(SweepRow {
                threshold: a,
                n_selected: id.selected.len(),
                error_at_n: Some(id.result.errors[0]),
            }),
            Err(Error::InvalidConfig(_)) => Ok(SweepRow {
                threshold: a,
                n_selected: 0,
                error_at_n: None,
            }),
            Err(e) => Err(e),
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "threshold,n_voxels,error_at_N")?;
    for r in rows {
        let e = r.error_at_n.map(|e| format!("{e:.12}")).unwrap_or_else(|| "NA".into());
        writeln!(out, "{},{},{e}", r.threshold, r.n_selected)?;
    }
    Ok(())
}

/// `(b, exact, mc, mc_se)` rows for the Monte Carlo cross-check.
pub fn monte_carlo_check(id: &Identification, draws: usize, seed: u64) -> Result<Vec<(usize, f64, McEstimate)>> {
    id.result
        .b_grid
        .iter()
        .zip(&id.result.errors)
        .map(|(&b, &e)| Ok((b, e, mc_from_table(&id.table, b, draws, rng::mix(seed, b as u64))?)))
        .collect()
}

pub fn write_mc_csv(rows: &[(usize, f64, McEstimate)], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "b,exact_error,mc_error,mc_std_error,draws")?;
    for (b, e, mc) in rows {
        writeln!(out, "{b},{e:.12},{:.12},{:.12},{}", mc.error, mc.std_error, mc.draws)?;
    }
    Ok(())
}

/// A simulated event-related series with its schedule.
#[derive(Debug, Clone)]
pub struct BoldRun {
    pub schedule: EventSchedule,
    pub series: BoldSeries,
}

/// Simulates one series: standard normal amplitudes, the canonical shape
/// delayed by `hrf_delay`, and AR(1) noise with sd `sd(A) / snr` (none when
/// `snr <= 0`).
pub fn simulate_bold(cfg: &BoldConfig, seed: u64) -> Result<BoldRun> {
    use rand_distr::{Distribution, StandardNormal};
    let schedule = EventSchedule::generate(cfg.n_images, cfg.repeats, cfg.spacing, cfg.sample_rate, rng::mix(seed, 0))?;
    let mut r = rng::stream(seed, 1);
    let amplitudes: Vec<f64> = (0..cfg.n_images).map(|_| StandardNormal.sample(&mut r)).collect();
    let delay = cfg.hrf_delay;
    let hrf = HrfSpec::from_shape(cfg.window, cfg.n_fourier, cfg.sample_rate, |t| canonical_shape(t - delay))?;
    let k = amplitudes.len() as f64;
    let mean = amplitudes.iter().sum::<f64>() / k;
    let sd = (amplitudes.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / k).sqrt();
    let (rho, noise_sd) = if cfg.snr > 0.0 { (cfg.rho, sd / cfg.snr) } else { (0.0, 0.0) };
    let series = simulate(&schedule, &amplitudes, &hrf, &cfg.nuisance, rho, noise_sd, rng::mix(seed, 2))?;
    Ok(BoldRun { schedule, series })
}
