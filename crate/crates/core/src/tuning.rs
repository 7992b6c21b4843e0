//! Tuning functions of a fitted voxel, read off by predicting responses to
//! synthetic probe images. Only `predict` is used; training data is never
//! touched.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::encoding::{predict, FittedModel, ModelKind, VoxelModel};
use crate::error::{invalid_arg, Result};
use crate::gabor::{featurize_images, FeatureMatrix, GaborBank};
use crate::smoothing::quantile_sorted;
use crate::stimuli::{generate_grating, generate_pink_noise, point_stimulus, scale_contrast, Image};

pub const DEFAULT_NOISE_PROBES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveFieldMap {
    pub kind: ModelKind,
    pub grid_size: usize,
    pub amplitude: f64,
    /// Pixel row and column of each probe, row-major over the grid.
    pub locations: Vec<(usize, usize)>,
    pub values: Vec<f64>,
    /// Probe evaluations that fell outside an active function's knot range.
    pub extrapolated: usize,
}

impl ReceptiveFieldMap {
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        self.locations[best]
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "row,col,value")?;
        for ((a, b), v) in self.locations.iter().zip(&self.values) {
            writeln!(out, "{a},{b},{v:.12e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningCurve {
    pub kind: ModelKind,
    pub axis_names: Vec<String>,
    /// One row of parameter values per probe.
    pub axis: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub seed: Option<u64>,
    pub n_noise: Option<usize>,
    /// Deciles of training-image RMS contrast, when supplied.
    pub contrast_deciles: Option<Vec<f64>>,
    pub extrapolated: usize,
}

impl TuningCurve {
    pub fn argmax(&self) -> &[f64] {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        &self.axis[best]
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{},value", self.axis_names.join(","))?;
        for (row, v) in self.axis.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.12e}")).collect();
            writeln!(out, "{},{v:.12e}", cells.join(","))?;
        }
        Ok(())
    }
}

fn check_bank(model: &VoxelModel, bank: &GaborBank) -> Result<()> {
    if bank.hash() != model.bank_hash || bank.len() != model.p {
        return Err(invalid_arg(format!(
            "bank {} does not match the model's bank {}",
            bank.hash(),
            model.bank_hash
        )));
    }
    Ok(())
}

/// Predictions for probe images plus the number of spline evaluations that
/// left the training knot range.
fn probe(model: &VoxelModel, bank: &GaborBank, images: &[Image]) -> Result<(Vec<f64>, usize)> {
    let features = featurize_images(bank, images)?;
    let values = predict(model, &features)?;
    Ok((values, count_extrapolated(model, &features)))
}

fn count_extrapolated(model: &VoxelModel, features: &FeatureMatrix) -> usize {
    let FittedModel::Additive { functions, .. } = &model.fit else {
        return 0;
    };
    let t = model.kind.transform();
    let mut count = 0;
    for f in functions {
        let (lo, hi) = match (f.knots.first(), f.knots.last()) {
            (Some(lo), Some(hi)) => (*lo, *hi),
            _ => continue,
        };
        let col = model.screened[f.feature];
        count += (0..features.n())
            .filter(|&i| {
                let x = t.apply(features.values[(i, col)]);
                x < lo || x > hi
            })
            .count();
    }
    count
}

/// Point-stimulus responses on a `grid_size x grid_size` lattice of cell
/// centers covering the image.
pub fn spatial_rf(model: &VoxelModel, bank: &GaborBank, grid_size: usize, amplitude: f64) -> Result<ReceptiveFieldMap> {
    if grid_size < 2 {
        return Err(invalid_arg(format!("grid size must be >= 2, got {grid_size}")));
    }
    check_bank(model, bank)?;
    let size = bank.image_size;
    let cell = size as f64 / grid_size as f64;
    let pos = |g: usize| (((g as f64 + 0.5) * cell).floor() as usize).min(size - 1);
    let locations: Vec<(usize, usize)> = (0..grid_size)
        .flat_map(|gi| (0..grid_size).map(move |gj| (pos(gi), pos(gj))))
        .collect();
    let images = locations
        .iter()
        .map(|&(a, b)| point_stimulus(size, a, b, amplitude))
        .collect::<Result<Vec<_>>>()?;
    let (values, extrapolated) = probe(model, bank, &images)?;
    Ok(ReceptiveFieldMap {
        kind: model.kind,
        grid_size,
        amplitude,
        locations,
        values,
        extrapolated,
    })
}

/// Full-field grating responses over frequency (cycles per image) x
/// orientation (radians).
pub fn ori_freq_tuning(
    model: &VoxelModel,
    bank: &GaborBank,
    frequencies: &[f64],
    orientations: &[f64],
    phase: f64,
) -> Result<TuningCurve> {
    check_bank(model, bank)?;
    let mut axis = Vec::with_capacity(frequencies.len() * orientations.len());
    let mut images = Vec::with_capacity(axis.capacity());
    for &f in frequencies {
        for &o in orientations {
            axis.push(vec![f, o]);
            images.push(generate_grating(bank.image_size, f, o, phase)?);
        }
    }
    let (values, extrapolated) = probe(model, bank, &images)?;
    Ok(TuningCurve {
        kind: model.kind,
        axis_names: vec!["frequency".into(), "orientation".into()],
        axis,
        values,
        seed: None,
        n_noise: None,
        contrast_deciles: None,
        extrapolated,
    })
}

/// `orientations` evenly spaced angles in `[0, π)`.
pub fn orientation_grid(orientations: usize) -> Vec<f64> {
    (0..orientations).map(|k| k as f64 * PI / orientations as f64).collect()
}

/// Mean response to `n_noise` pink-noise images (seeds `(seed, 0..n_noise)`)
/// scaled to each RMS contrast `t`.
pub fn contrast_tuning(
    model: &VoxelModel,
    bank: &GaborBank,
    t_values: &[f64],
    seed: u64,
    n_noise: usize,
) -> Result<TuningCurve> {
    check_bank(model, bank)?;
    if n_noise == 0 {
        return Err(invalid_arg("contrast tuning needs at least one noise image"));
    }
    if let Some(t) = t_values.iter().find(|t| !(**t >= 0.0)) {
        return Err(invalid_arg(format!("contrast values must be >= 0, got {t}")));
    }
    let bases = (0..n_noise as u64)
        .map(|i| generate_pink_noise(bank.image_size, crate::rng::mix(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(t_values.len() * n_noise);
    for &t in t_values {
        for w in &bases {
            images.push(scale_contrast(w, t)?);
        }
    }
    let (raw, extrapolated) = probe(model, bank, &images)?;
    let values = raw
        .chunks(n_noise)
        .map(|c| c.iter().sum::<f64>() / n_noise as f64)
        .collect();
    Ok(TuningCurve {
        kind: model.kind,
        axis_names: vec!["contrast".into()],
        axis: t_values.iter().map(|&t| vec![t]).collect(),
        values,
        seed: Some(seed),
        n_noise: Some(n_noise),
        contrast_deciles: None,
        extrapolated,
    })
}

/// Deciles (0.1, ..., 0.9) of RMS contrast over a set of images.
pub fn contrast_deciles(images: &[Image]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(invalid_arg("no images"));
    }
    let mut rms: Vec<f64> = images.iter().map(Image::rms).collect();
    rms.sort_by(f64::total_cmp);
    Ok((1..10).map(|d| quantile_sorted(&rms, d as f64 / 10.0)).collect())
}
