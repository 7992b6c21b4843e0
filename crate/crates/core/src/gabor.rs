//! Multi-scale Gabor wavelet bank and contrast-energy features.
//!
//! Scale `ℓ` tiles the image with a `2^ℓ x 2^ℓ` grid of centers. Each wavelet
//! is a complex sinusoid at `2^ℓ` cycles per image under an isotropic Gaussian
//! envelope with `σ = (size / 2^ℓ) / 2.5` pixels. The envelope is truncated at
//! [`ENVELOPE_RADIUS`] standard deviations, so fine-scale wavelets are stored as
//! small patches. Real and imaginary parts are mean-subtracted over the whole
//! image, then the complex pair is scaled to unit L2 norm.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid_arg, Error, Result};
use crate::stimuli::{Image, StimulusSet};

/// Envelope truncation radius in units of σ.
pub const ENVELOPE_RADIUS: f64 = 4.0;
/// Envelope width divisor: `σ = cell_width / SIGMA_DIVISOR`.
pub const SIGMA_DIVISOR: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    pub level: usize,
    pub orientation: f64,
    /// Center in (row, column) pixel-index coordinates.
    pub center: (f64, f64),
    /// Cycles per image.
    pub frequency: f64,
    pub sigma_parallel: f64,
    pub sigma_orthogonal: f64,
}

/// One wavelet stored as a rectangular patch; pixels outside it are zero.
#[derive(Debug, Clone)]
pub struct Wavelet {
    pub params: GaborParams,
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl Wavelet {
    fn build(image_size: usize, params: GaborParams) -> Self {
        let n = image_size as f64;
        let reach = ENVELOPE_RADIUS * params.sigma_parallel.max(params.sigma_orthogonal);
        let clamp = |v: f64| v.max(0.0).min(n - 1.0);
        let row0 = clamp((params.center.0 - reach).floor()) as usize;
        let row1 = clamp((params.center.0 + reach).ceil()) as usize;
        let col0 = clamp((params.center.1 - reach).floor()) as usize;
        let col1 = clamp((params.center.1 + reach).ceil()) as usize;
        let (rows, cols) = (row1 - row0 + 1, col1 - col0 + 1);

        let (sin_t, cos_t) = params.orientation.sin_cos();
        let k = 2.0 * PI * params.frequency / n;
        let mut re = Vec::with_capacity(rows * cols);
        let mut im = Vec::with_capacity(rows * cols);
        for a in row0..=row1 {
            let da = a as f64 - params.center.0;
            for b in col0..=col1 {
                let db = b as f64 - params.center.1;
                let along = da * cos_t + db * sin_t;
                let across = -da * sin_t + db * cos_t;
                let env = (-0.5 * (along / params.sigma_parallel).powi(2)
                    - 0.5 * (across / params.sigma_orthogonal).powi(2))
                .exp();
                re.push(env * (k * along).cos());
                im.push(env * (k * along).sin());
            }
        }
        // Zero outside the patch, so subtracting the patch mean zeroes the
        // full-image sum.
        for grid in [&mut re, &mut im] {
            let mean = grid.iter().sum::<f64>() / grid.len() as f64;
            grid.iter_mut().for_each(|v| *v -= mean);
        }
        let norm = re
            .iter()
            .chain(im.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            re.iter_mut().chain(im.iter_mut()).for_each(|v| *v /= norm);
        }
        Wavelet {
            params,
            row0,
            col0,
            rows,
            cols,
            re,
            im,
        }
    }

    /// Real and imaginary grids expanded to the full image.
    pub fn dense(&self, image_size: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; image_size * image_size];
        let mut im = vec![0.0; image_size * image_size];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let dst = (self.row0 + r) * image_size + self.col0 + c;
                re[dst] = self.re[r * self.cols + c];
                im[dst] = self.im[r * self.cols + c];
            }
        }
        (re, im)
    }

    /// `(Σ Re g · s)² + (Σ Im g · s)²`.
    pub fn energy(&self, pixels: &[f64], image_size: usize) -> f64 {
        let (mut pr, mut pi) = (0.0, 0.0);
        for r in 0..self.rows {
            let src = &pixels[(self.row0 + r) * image_size + self.col0..][..self.cols];
            let re = &self.re[r * self.cols..][..self.cols];
            let im = &self.im[r * self.cols..][..self.cols];
            for ((s, gr), gi) in src.iter().zip(re).zip(im) {
                pr += gr * s;
                pi += gi * s;
            }
        }
        pr * pr + pi * pi
    }
}

#[derive(Debug, Clone)]
pub struct GaborBank {
    pub image_size: usize,
    pub levels: usize,
    pub orientations: usize,
    pub wavelets: Vec<Wavelet>,
    hash: String,
}

/// `orientations × Σ_{ℓ<levels} 4^ℓ`.
pub fn wavelet_count(levels: usize, orientations: usize) -> usize {
    orientations * (0..levels).map(|l| 1usize << (2 * l)).sum::<usize>()
}

pub fn build_bank(image_size: usize, levels: usize, orientations: usize) -> Result<GaborBank> {
    if levels == 0 || orientations == 0 {
        return Err(invalid_arg("bank needs at least one level and one orientation"));
    }
    if levels > 16 || image_size < (1usize << (levels - 1)) {
        return Err(invalid_arg(format!(
            "image size {image_size} too small for {levels} levels (finest grid {})",
            1usize << (levels - 1).min(16)
        )));
    }
    let n = image_size as f64;
    let mut params = Vec::with_capacity(wavelet_count(levels, orientations));
    for level in 0..levels {
        let grid = 1usize << level;
        let cell = n / grid as f64;
        let sigma = cell / SIGMA_DIVISOR;
        for i in 0..grid {
            for j in 0..grid {
                let center = ((i as f64 + 0.5) * cell - 0.5, (j as f64 + 0.5) * cell - 0.5);
                for k in 0..orientations {
                    params.push(GaborParams {
                        level,
                        orientation: k as f64 * PI / orientations as f64,
                        center,
                        frequency: grid as f64,
                        sigma_parallel: sigma,
                        sigma_orthogonal: sigma,
                    });
                }
            }
        }
    }
    let wavelets: Vec<Wavelet> = params
        .into_par_iter()
        .map(|p| Wavelet::build(image_size, p))
        .collect();
    let hash = bank_digest(image_size, levels, orientations, &wavelets);
    Ok(GaborBank {
        image_size,
        levels,
        orientations,
        wavelets,
        hash,
    })
}

fn bank_digest(image_size: usize, levels: usize, orientations: usize, wavelets: &[Wavelet]) -> String {
    let mut h = Sha256::new();
    for v in [image_size, levels, orientations, wavelets.len()] {
        h.update((v as u64).to_le_bytes());
    }
    for w in wavelets {
        for v in w.re.iter().chain(&w.im) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl GaborBank {
    pub fn len(&self) -> usize {
        self.wavelets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelets.is_empty()
    }

    /// Checksum tying feature matrices to this bank.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

pub fn contrast_energy(bank: &GaborBank, s: &Image) -> Result<Vec<f64>> {
    if s.size() != bank.image_size {
        return Err(invalid_arg(format!(
            "image size {} does not match bank size {}",
            s.size(),
            bank.image_size
        )));
    }
    Ok(bank
        .wavelets
        .iter()
        .map(|w| w.energy(s.pixels(), bank.image_size))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Raw,
    Sqrt,
    Log1pSqrt,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Raw => x,
            Transform::Sqrt => x.sqrt(),
            Transform::Log1pSqrt => x.sqrt().ln_1p(),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Transform::Raw => "raw",
            Transform::Sqrt => "sqrt",
            Transform::Log1pSqrt => "log1psqrt",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "raw" => Some(Transform::Raw),
            "sqrt" => Some(Transform::Sqrt),
            "log1psqrt" => Some(Transform::Log1pSqrt),
            _ => None,
        }
    }
}

/// `n` stimuli by `p` features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub transform: Transform,
    pub bank_hash: String,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>, transform: Transform, bank_hash: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid_arg("feature values must be finite"));
        }
        if transform == Transform::Raw && values.iter().any(|&v| v < 0.0) {
            return Err(invalid_arg("raw contrast-energy features must be nonnegative"));
        }
        Ok(Self {
            values,
            transform,
            bank_hash: bank_hash.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Rows `rows` in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select_rows(rows),
            transform: self.transform,
            bank_hash: self.bank_hash.clone(),
        }
    }
}

pub fn transform_features(f: &FeatureMatrix, kind: Transform) -> Result<FeatureMatrix> {
    if f.transform != Transform::Raw {
        return Err(Error::InvalidState(format!(
            "features already transformed ({})",
            f.transform.tag()
        )));
    }
    if kind == Transform::Raw {
        return Ok(f.clone());
    }
    Ok(FeatureMatrix {
        values: f.values.map(|v| kind.apply(v)),
        transform: kind,
        bank_hash: f.bank_hash.clone(),
    })
}

pub fn featurize_set(bank: &GaborBank, stimuli: &StimulusSet) -> Result<FeatureMatrix> {
    featurize_images(bank, &stimuli.images)
}

pub fn featurize_images(bank: &GaborBank, images: &[Image]) -> Result<FeatureMatrix> {
    let rows = images
        .par_iter()
        .map(|im| contrast_energy(bank, im))
        .collect::<Result<Vec<_>>>()?;
    let p = bank.len();
    let values = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    FeatureMatrix::new(values, Transform::Raw, bank.hash())
}
