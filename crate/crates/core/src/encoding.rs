//! Per-voxel encoding models: transform, screen, fit a penalty path, select by
//! BIC, and predict responses to new stimuli.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::gabor::{transform_features, FeatureMatrix, Transform};
use crate::rng;
use crate::smoothing::{build_smoother, evaluate_spline, loess};
use crate::sparse_fit::{
    geometric_grid, lasso_path, screen_by_correlation, spam_lambda_max, spam_path, LassoOptions, LassoProblem,
    ModelPath, PathFit, SpamOptions, Standardization,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "sqrtX")]
    SqrtX,
    #[serde(rename = "log1psqrtX")]
    Log1pSqrtX,
    #[serde(rename = "vspam")]
    VSpam,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::SqrtX, ModelKind::Log1pSqrtX, ModelKind::VSpam];

    /// Feature transform the model consumes.
    pub fn transform(self) -> Transform {
        match self {
            ModelKind::SqrtX => Transform::Sqrt,
            ModelKind::Log1pSqrtX | ModelKind::VSpam => Transform::Log1pSqrt,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::SqrtX => "sqrtX",
            ModelKind::Log1pSqrtX => "log1psqrtX",
            ModelKind::VSpam => "vspam",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sqrtx" | "sqrt" => Ok(ModelKind::SqrtX),
            "log1psqrtx" | "log1psqrt" => Ok(ModelKind::Log1pSqrtX),
            "vspam" | "v-spam" => Ok(ModelKind::VSpam),
            _ => Err(invalid_arg(format!("unknown model kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub screen_k: usize,
    pub target_df: f64,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    pub spam: SpamOptions,
    pub lasso: LassoOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            screen_k: 500,
            target_df: 4.0,
            n_lambda: 50,
            lambda_ratio: 1e-3,
            spam: SpamOptions::default(),
            lasso: LassoOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditiveFunction {
    /// Position in `VoxelModel::screened`.
    pub feature: usize,
    pub knots: Vec<f64>,
    pub column_means: Vec<f64>,
    pub linear_fallback: bool,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum FittedModel {
    /// Coefficients act on standardized screened columns.
    Linear { intercept: f64, coefficients: Vec<f64> },
    Additive { intercept: f64, functions: Vec<AdditiveFunction> },
}

impl FittedModel {
    pub fn intercept(&self) -> f64 {
        match self {
            FittedModel::Linear { intercept, .. } | FittedModel::Additive { intercept, .. } => *intercept,
        }
    }

    /// Screened positions with a nonzero contribution.
    pub fn active(&self) -> Vec<usize> {
        match self {
            FittedModel::Linear { coefficients, .. } => coefficients
                .iter()
                .enumerate()
                .filter(|(_, b)| **b != 0.0)
                .map(|(j, _)| j)
                .collect(),
            FittedModel::Additive { functions, .. } => functions.iter().map(|f| f.feature).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelModel {
    pub kind: ModelKind,
    /// Raw feature count the model was trained against.
    pub p: usize,
    pub bank_hash: String,
    pub screened: Vec<usize>,
    pub standardization: Option<Standardization>,
    pub fit: FittedModel,
    pub lambda: f64,
    pub rss: f64,
    pub sigma2_hat: f64,
    pub train_r2: f64,
    pub df: f64,
    pub n_train: usize,
    pub converged: bool,
    /// Diagnostics such as `not_converged` or `empty`.
    #[serde(default)]
    pub flags: Vec<String>,
}

pub const FLAG_NOT_CONVERGED: &str = "not_converged";
pub const FLAG_EMPTY: &str = "empty";

/// Per-λ diagnostics of the path a model was selected from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub lambdas: Vec<f64>,
    pub rss: Vec<f64>,
    pub df: Vec<f64>,
    pub bic: Vec<f64>,
    pub train_r2: Vec<f64>,
    pub selected: usize,
}

impl PathSummary {
    fn from_path<F: PathFit>(path: &ModelPath<F>, tss: f64) -> Self {
        Self {
            lambdas: path.lambdas.clone(),
            rss: path.fits.iter().map(PathFit::rss).collect(),
            df: path.fits.iter().map(PathFit::df).collect(),
            bic: path.bic.clone(),
            train_r2: path.fits.iter().map(|f| r2_from_rss(f.rss(), tss)).collect(),
            selected: path.selected,
        }
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "lambda,rss,df,bic,train_r2,selected")?;
        for i in 0..self.lambdas.len() {
            writeln!(
                out,
                "{:.12e},{:.12e},{},{:.12e},{:.12e},{}",
                self.lambdas[i],
                self.rss[i],
                self.df[i],
                self.bic[i],
                self.train_r2[i],
                u8::from(i == self.selected)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VoxelFit {
    pub model: VoxelModel,
    pub path: PathSummary,
}

fn r2_from_rss(rss: f64, tss: f64) -> f64 {
    if tss > 0.0 {
        (1.0 - rss / tss).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

fn column(x: &DMatrix<f64>, j: usize) -> Vec<f64> {
    x.column(j).iter().copied().collect()
}

pub fn fit_voxel(f_raw: &FeatureMatrix, y: &[f64], kind: ModelKind, config: &FitConfig) -> Result<VoxelModel> {
    fit_voxel_with_path(f_raw, y, kind, config).map(|f| f.model)
}

/// Transform, screen, fit the λ path and keep the BIC minimizer.
pub fn fit_voxel_with_path(f_raw: &FeatureMatrix, y: &[f64], kind: ModelKind, config: &FitConfig) -> Result<VoxelFit> {
    if f_raw.transform != Transform::Raw {
        return Err(Error::InvalidState("fit_voxel expects raw features".into()));
    }
    let transformed = transform_features(f_raw, kind.transform())?;
    fit_transformed(&transformed, y, kind, config)
}

/// As [`fit_voxel_with_path`] on features already carrying the kind's
/// transform, so one transformed matrix can serve many voxels.
pub fn fit_transformed(transformed: &FeatureMatrix, y: &[f64], kind: ModelKind, config: &FitConfig) -> Result<VoxelFit> {
    let n = transformed.n();
    if transformed.transform != kind.transform() {
        return Err(Error::InvalidState(format!(
            "{kind} needs {} features, got {}",
            kind.transform().tag(),
            transformed.transform.tag()
        )));
    }
    if y.len() != n {
        return Err(invalid_arg(format!("response length {} != {n} stimuli", y.len())));
    }
    if n < 50 {
        return Err(invalid_arg(format!("encoding fits need n >= 50, got {n}")));
    }
    let ymean = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - ymean).powi(2)).sum();
    if !(tss > 0.0) {
        return Err(invalid_arg("response is constant"));
    }
    if config.n_lambda == 0 {
        return Err(Error::InvalidConfig("n_lambda must be >= 1".into()));
    }

    let p = transformed.p();
    let screened: Vec<usize> = if p > config.screen_k {
        screen_by_correlation(&transformed.values, y, config.screen_k)?.kept
    } else {
        (0..p).collect()
    };
    let xs = transformed.values.select_columns(&screened);

    let (fit, lambda, path, converged, standardization) = match kind {
        ModelKind::SqrtX | ModelKind::Log1pSqrtX => {
            let std = Standardization::fit(&xs);
            let z = std.apply(&xs);
            let problem = LassoProblem::new(&z, y)?;
            let grid = geometric_grid(problem.lambda_max(), config.n_lambda, config.lambda_ratio);
            let path = lasso_path(&problem, &grid, &config.lasso)?;
            let sel = path.selected_fit();
            let fit = FittedModel::Linear {
                intercept: sel.intercept,
                coefficients: sel.coefficients.clone(),
            };
            (fit, sel.lambda, PathSummary::from_path(&path, tss), sel.converged, Some(std))
        }
        ModelKind::VSpam => {
            let smoothers = (0..screened.len())
                .map(|j| build_smoother(&column(&xs, j), config.target_df))
                .collect::<Result<Vec<_>>>()?;
            let grid = geometric_grid(spam_lambda_max(&smoothers, y), config.n_lambda, config.lambda_ratio);
            let path = spam_path(&smoothers, y, &grid, &config.spam)?;
            let sel = path.selected_fit();
            let functions = sel
                .components
                .iter()
                .map(|c| {
                    let sm = &smoothers[c.feature];
                    AdditiveFunction {
                        feature: c.feature,
                        knots: sm.knots.clone(),
                        column_means: sm.column_means.clone(),
                        linear_fallback: sm.linear_fallback,
                        coefficients: c.coefficients.clone(),
                    }
                })
                .collect();
            let fit = FittedModel::Additive {
                intercept: sel.intercept,
                functions,
            };
            (fit, sel.lambda, PathSummary::from_path(&path, tss), sel.converged, None)
        }
    };
    let df = path.df[path.selected];

    let mut model = VoxelModel {
        kind,
        p,
        bank_hash: transformed.bank_hash.clone(),
        screened,
        standardization,
        fit,
        lambda,
        rss: 0.0,
        sigma2_hat: 0.0,
        train_r2: 0.0,
        df,
        n_train: n,
        converged,
        flags: Vec::new(),
    };
    if !converged {
        model.flags.push(FLAG_NOT_CONVERGED.into());
    }
    if model.is_empty() {
        model.flags.push(FLAG_EMPTY.into());
    }
    // In-sample statistics come from the same path as out-of-sample prediction.
    let fitted = predict_transformed(&model, transformed)?;
    let rss: f64 = y.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum();
    model.rss = rss;
    model.sigma2_hat = rss / (n as f64 - df).max(1.0);
    model.train_r2 = r2_from_rss(rss, tss);
    Ok(VoxelFit { model, path })
}

impl VoxelModel {
    /// Prediction for one raw feature row.
    pub fn predict_row(&self, raw: &[f64]) -> f64 {
        let t = self.kind.transform();
        self.predict_transformed_row(|j| t.apply(raw[j]))
    }

    /// Prediction given access to transformed feature `j`.
    fn predict_transformed_row(&self, x: impl Fn(usize) -> f64) -> f64 {
        match &self.fit {
            FittedModel::Linear { intercept, coefficients } => {
                let std = self.standardization.as_ref();
                let mut acc = *intercept;
                for (j, &b) in coefficients.iter().enumerate() {
                    if b != 0.0 {
                        let v = x(self.screened[j]);
                        let z = match std {
                            Some(s) => (v - s.center[j]) / s.scale[j],
                            None => v,
                        };
                        acc += b * z;
                    }
                }
                acc
            }
            FittedModel::Additive { intercept, functions } => {
                let mut acc = *intercept;
                for f in functions {
                    let v = x(self.screened[f.feature]);
                    acc += evaluate_spline(&f.knots, &f.column_means, f.linear_fallback, &f.coefficients, v);
                }
                acc
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.fit.active().is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn predict(model: &VoxelModel, f_raw: &FeatureMatrix) -> Result<Vec<f64>> {
    if f_raw.bank_hash != model.bank_hash {
        return Err(invalid_arg(format!(
            "features come from bank {} but the model was trained on bank {}",
            f_raw.bank_hash, model.bank_hash
        )));
    }
    if f_raw.transform != Transform::Raw || f_raw.p() != model.p {
        return Err(invalid_arg(format!(
            "expected raw features with p = {}, got {} with p = {}",
            model.p,
            f_raw.transform.tag(),
            f_raw.p()
        )));
    }
    let mut row = vec![0.0; f_raw.p()];
    Ok((0..f_raw.n())
        .map(|i| {
            for (r, v) in row.iter_mut().zip(f_raw.values.row(i).iter()) {
                *r = *v;
            }
            model.predict_row(&row)
        })
        .collect())
}

/// Prediction from features that already carry the model's transform.
fn predict_transformed(model: &VoxelModel, f: &FeatureMatrix) -> Result<Vec<f64>> {
    if f.transform != model.kind.transform() || f.p() != model.p || f.bank_hash != model.bank_hash {
        return Err(invalid_arg("transformed features do not match the model"));
    }
    Ok((0..f.n())
        .map(|i| model.predict_transformed_row(|j| f.values[(i, j)]))
        .collect())
}

/// Squared Pearson correlation; 0 when either side is constant.
pub fn predictive_r2(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(invalid_arg("predictive_r2: length mismatch"));
    }
    if pred.len() < 3 {
        return Err(invalid_arg("predictive_r2 needs at least 3 points"));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let ma = actual.iter().sum::<f64>() / n;
    let (mut spp, mut saa, mut spa) = (0.0, 0.0, 0.0);
    for (p, a) in pred.iter().zip(actual) {
        spp += (p - mp).powi(2);
        saa += (a - ma).powi(2);
        spa += (p - mp) * (a - ma);
    }
    if spp <= 0.0 || saa <= 0.0 {
        return Ok(0.0);
    }
    Ok((spa * spa / (spp * saa)).min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDiagnostic {
    pub fitted: Vec<f64>,
    pub residual: Vec<f64>,
    /// LOESS of residual on fitted value, at each fitted value.
    pub loess: Vec<f64>,
    /// `None` when the fitted values are constant.
    pub standardized_fitted: Option<Vec<f64>>,
}

impl ResidualDiagnostic {
    pub fn loess_range(&self) -> f64 {
        let max = self.loess.iter().cloned().fold(f64::MIN, f64::max);
        let min = self.loess.iter().cloned().fold(f64::MAX, f64::min);
        max - min
    }
}

pub fn residual_diagnostic(model: &VoxelModel, f_raw: &FeatureMatrix, y: &[f64], span: f64) -> Result<ResidualDiagnostic> {
    let fitted = predict(model, f_raw)?;
    if y.len() != fitted.len() {
        return Err(invalid_arg("residual_diagnostic: response length mismatch"));
    }
    let residual: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let curve = loess(&fitted, &residual, span)?;
    let n = fitted.len() as f64;
    let mean = fitted.iter().sum::<f64>() / n;
    let sd = (fitted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let standardized_fitted = (sd > 0.0).then(|| fitted.iter().map(|v| (v - mean) / sd).collect());
    Ok(ResidualDiagnostic {
        fitted,
        residual,
        loess: curve,
        standardized_fitted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum FunctionFamily {
    Linear,
    /// `a · tanh(x / scale)`.
    Saturating { scale: f64 },
    /// `a · exp(−(x − center)² / 2 width²)`.
    Bump { center: f64, width: f64 },
}

impl FunctionFamily {
    pub fn eval(self, amplitude: f64, x: f64) -> f64 {
        match self {
            FunctionFamily::Linear => amplitude * x,
            FunctionFamily::Saturating { scale } => amplitude * (x / scale).tanh(),
            FunctionFamily::Bump { center, width } => amplitude * (-(x - center).powi(2) / (2.0 * width * width)).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVoxelSpec {
    pub active: Vec<usize>,
    pub families: Vec<FunctionFamily>,
    pub amplitudes: Vec<f64>,
    pub intercept: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SyntheticVoxelSpec {
    fn validate(&self, p: usize) -> Result<()> {
        if self.active.is_empty() {
            return Err(invalid_arg("synthetic voxel needs a nonempty active set"));
        }
        if self.families.len() != self.active.len() || self.amplitudes.len() != self.active.len() {
            return Err(invalid_arg("active, families and amplitudes must align"));
        }
        if let Some(&j) = self.active.iter().find(|&&j| j >= p) {
            return Err(invalid_arg(format!("active feature {j} out of range (p = {p})")));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(invalid_arg("noise_sd must be >= 0"));
        }
        Ok(())
    }

    /// Noiseless response: `β₀ + Σ f_j(log(1 + √X_j))`.
    pub fn signal(&self, f_raw: &FeatureMatrix) -> Result<Vec<f64>> {
        self.validate(f_raw.p())?;
        Ok((0..f_raw.n())
            .map(|i| {
                self.intercept
                    + self
                        .active
                        .iter()
                        .zip(&self.families)
                        .zip(&self.amplitudes)
                        .map(|((&j, fam), &a)| fam.eval(a, Transform::Log1pSqrt.apply(f_raw.values[(i, j)])))
                        .sum::<f64>()
            })
            .collect())
    }

    /// Signal plus Gaussian noise drawn from stream `(seed, stream)`.
    pub fn sample(&self, f_raw: &FeatureMatrix, stream: u64) -> Result<Vec<f64>> {
        let mut y = self.signal(f_raw)?;
        if self.noise_sd > 0.0 {
            let mut rng = rng::stream(self.seed, stream);
            let normal = Normal::new(0.0, self.noise_sd).map_err(|e| invalid_arg(e.to_string()))?;
            y.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        Ok(y)
    }
}

/// `n x voxels` response matrix; voxel `v` uses its own seed.
pub fn generate_population(specs: &[SyntheticVoxelSpec], f_raw: &FeatureMatrix) -> Result<DMatrix<f64>> {
    generate_population_stream(specs, f_raw, 0)
}

/// As [`generate_population`], drawing noise from sub-stream `stream` so
/// training and validation sets get independent noise.
pub fn generate_population_stream(specs: &[SyntheticVoxelSpec], f_raw: &FeatureMatrix, stream: u64) -> Result<DMatrix<f64>> {
    let cols = specs
        .iter()
        .map(|s| s.sample(f_raw, stream))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(f_raw.n(), specs.len(), |i, v| cols[v][i]))
}

/// Per-voxel training and predictive R² for several model kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingReport {
    pub kinds: Vec<ModelKind>,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub voxel: usize,
    /// Indexed like `EncodingReport::kinds`.
    pub train_r2: Vec<f64>,
    pub pred_r2: Vec<f64>,
    pub df: Vec<f64>,
    /// Range of the training residual LOESS curve.
    pub loess_range: Vec<f64>,
}

impl EncodingReport {
    pub fn column(&self, kind: ModelKind) -> Option<usize> {
        self.kinds.iter().position(|&k| k == kind)
    }

    /// Median predictive R² of `kind` over all voxels.
    pub fn median_pred_r2(&self, kind: ModelKind) -> Option<f64> {
        let c = self.column(kind)?;
        median(self.rows.iter().map(|r| r.pred_r2[c]).collect())
    }

    /// Median over voxels where both kinds exceed `min_r2` of
    /// `(pred_r2[b] − pred_r2[a], pred_r2[b] / pred_r2[a] − 1)`.
    pub fn median_improvement(&self, a: ModelKind, b: ModelKind, min_r2: f64) -> Option<(f64, f64)> {
        let (ca, cb) = (self.column(a)?, self.column(b)?);
        let kept: Vec<&ReportRow> = self
            .rows
            .iter()
            .filter(|r| r.pred_r2[ca] > min_r2 && r.pred_r2[cb] > min_r2)
            .collect();
        let diff = median(kept.iter().map(|r| r.pred_r2[cb] - r.pred_r2[ca]).collect())?;
        let ratio = median(kept.iter().map(|r| r.pred_r2[cb] / r.pred_r2[ca] - 1.0).collect())?;
        Some((diff, ratio))
    }

    /// One row per voxel with train/predictive R² per kind, then pairwise
    /// differences and relative changes of predictive R².
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let mut header = vec!["voxel".to_string()];
        for k in &self.kinds {
            header.push(format!("train_r2_{k}"));
            header.push(format!("pred_r2_{k}"));
            header.push(format!("df_{k}"));
            header.push(format!("loess_range_{k}"));
        }
        let pairs = self.pairs();
        for &(a, b) in &pairs {
            header.push(format!("diff_{}_minus_{}", self.kinds[b], self.kinds[a]));
            header.push(format!("ratio_{}_over_{}", self.kinds[b], self.kinds[a]));
        }
        writeln!(out, "{}", header.join(","))?;
        for r in &self.rows {
            let mut cells = vec![r.voxel.to_string()];
            for c in 0..self.kinds.len() {
                cells.push(format!("{:.10}", r.train_r2[c]));
                cells.push(format!("{:.10}", r.pred_r2[c]));
                cells.push(format!("{}", r.df[c]));
                cells.push(format!("{:.10}", r.loess_range[c]));
            }
            for &(a, b) in &pairs {
                cells.push(format!("{:.10}", r.pred_r2[b] - r.pred_r2[a]));
                let ratio = if r.pred_r2[a] > 0.0 { r.pred_r2[b] / r.pred_r2[a] } else { f64::NAN };
                cells.push(format!("{ratio:.10}"));
            }
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        let k = self.kinds.len();
        (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect()
    }
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(seed: u64, n: usize, p: usize) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = DMatrix::from_fn(n, p, |_, _| rng.gen_range(0.0f64..4.0).powi(2));
        FeatureMatrix::new(values, Transform::Raw, "test-bank").unwrap()
    }

    #[test]
    fn sqrt_model_recovers_noiseless_linear_data() {
        let f = random_features(1, 200, 30);
        let y: Vec<f64> = (0..200)
            .map(|i| 1.0 + 2.0 * f.values[(i, 3)].sqrt() - 1.5 * f.values[(i, 17)].sqrt())
            .collect();
        let m = fit_voxel(&f, &y, ModelKind::SqrtX, &FitConfig::default()).unwrap();
        assert!(m.train_r2 > 0.999, "train r2 {}", m.train_r2);
        let pred = predict(&m, &f).unwrap();
        let fit_again = predict(&m, &f).unwrap();
        assert_eq!(pred, fit_again);
        let rss: f64 = y.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((rss - m.rss).abs() <= 1e-10 * (1.0 + m.rss));
    }

    #[test]
    fn errors_and_empty_models() {
        let f = random_features(2, 60, 5);
        assert!(fit_voxel(&f, &[1.0; 60], ModelKind::SqrtX, &FitConfig::default()).is_err());
        assert!(fit_voxel(&f, &[1.0; 59], ModelKind::SqrtX, &FitConfig::default()).is_err());
        let mut other = f.clone();
        other.bank_hash = "other".into();
        let y: Vec<f64> = (0..60).map(|i| (i as f64).sin()).collect();
        let m = fit_voxel(&f, &y, ModelKind::VSpam, &FitConfig::default()).unwrap();
        assert!(predict(&m, &other).is_err());

        let empty = VoxelModel {
            fit: FittedModel::Linear {
                intercept: 2.5,
                coefficients: vec![0.0; 5],
            },
            ..m.clone()
        };
        assert!(predict(&empty, &f).unwrap().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn vspam_extrapolates_finitely() {
        let f = random_features(3, 150, 6);
        let y: Vec<f64> = (0..150)
            .map(|i| (Transform::Log1pSqrt.apply(f.values[(i, 2)]) / 0.5).tanh() + 0.05 * (i as f64).cos())
            .collect();
        let m = fit_voxel(&f, &y, ModelKind::VSpam, &FitConfig::default()).unwrap();
        assert!(!m.is_empty());
        let big = f.values.map(|v| v * 10.0 * 10.0);
        let probe = FeatureMatrix::new(big, Transform::Raw, "test-bank").unwrap();
        assert!(predict(&m, &probe).unwrap().iter().all(|v| v.is_finite()));
        let json = m.to_json().unwrap();
        assert_eq!(VoxelModel::from_json(&json).unwrap(), m);
    }

    #[test]
    fn predictive_r2_rules() {
        let a = [1.0, 2.0, 4.0, 3.0];
        assert!((predictive_r2(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(predictive_r2(&[1.0; 4], &a).unwrap(), 0.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((predictive_r2(&neg, &a).unwrap() - 1.0).abs() < 1e-15);
        let b = [0.3, 2.1, 3.3, 3.9];
        let affine: Vec<f64> = b.iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((predictive_r2(&affine, &a).unwrap() - predictive_r2(&b, &a).unwrap()).abs() < 1e-14);
        assert!(predictive_r2(&a[..3], &a).is_err());
    }

    #[test]
    fn population_generation() {
        let f = random_features(4, 1750, 10);
        let spec = SyntheticVoxelSpec {
            active: vec![1, 4],
            families: vec![FunctionFamily::Linear, FunctionFamily::Linear],
            amplitudes: vec![1.0, -2.0],
            intercept: 0.5,
            noise_sd: 0.0,
            seed: 9,
        };
        let y = generate_population(std::slice::from_ref(&spec), &f).unwrap();
        for i in 0..20 {
            let t = |j: usize| Transform::Log1pSqrt.apply(f.values[(i, j)]);
            assert!((y[(i, 0)] - (0.5 + t(1) - 2.0 * t(4))).abs() < 1e-12);
        }
        let noisy = SyntheticVoxelSpec { noise_sd: 0.7, ..spec.clone() };
        let a = generate_population(std::slice::from_ref(&noisy), &f).unwrap();
        assert_eq!(a, generate_population(std::slice::from_ref(&noisy), &f).unwrap());
        let resid: Vec<f64> = (0..1750).map(|i| a[(i, 0)] - y[(i, 0)]).collect();
        let m = resid.iter().sum::<f64>() / 1750.0;
        let sd = (resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / 1749.0).sqrt();
        assert!((sd - 0.7).abs() < 0.05 * 0.7);
        let bad = SyntheticVoxelSpec { active: vec![10], ..spec };
        assert!(generate_population(&[bad], &f).is_err());
    }

    #[test]
    fn residual_diagnostic_shapes() {
        let f = random_features(5, 120, 8);
        let y: Vec<f64> = (0..120).map(|i| f.values[(i, 0)].sqrt() + 0.1 * (i as f64 * 0.7).sin()).collect();
        let m = fit_voxel(&f, &y, ModelKind::SqrtX, &FitConfig::default()).unwrap();
        let d = residual_diagnostic(&m, &f, &y, 0.75).unwrap();
        assert_eq!(d.loess.len(), 120);
        assert!(d.loess.iter().all(|v| v.is_finite()));
        let sf = d.standardized_fitted.unwrap();
        assert!(sf.iter().sum::<f64>().abs() < 1e-9);
    }
}
