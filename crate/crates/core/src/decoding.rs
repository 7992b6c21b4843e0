//! Naive Bayes image identification and its exact average error over random
//! candidate sets.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::encoding::VoxelModel;
use crate::error::{invalid_arg, Error, Result};
use crate::gabor::FeatureMatrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelSelection {
    /// Keep voxels with training R² strictly above the threshold.
    Threshold(f64),
    /// Keep the `k` voxels with the highest training R²; ties go to the lower index.
    TopK(usize),
}

pub fn select_voxels(models: &[VoxelModel], criterion: VoxelSelection) -> Result<Vec<usize>> {
    let selected: Vec<usize> = match criterion {
        VoxelSelection::Threshold(alpha) => (0..models.len()).filter(|&v| models[v].train_r2 > alpha).collect(),
        VoxelSelection::TopK(k) => {
            if k > models.len() {
                return Err(Error::InvalidConfig(format!(
                    "top-{k} requested from {} voxels",
                    models.len()
                )));
            }
            let mut order: Vec<usize> = (0..models.len()).collect();
            let key = |v: usize| {
                let r = models[v].train_r2;
                if r.is_nan() { f64::NEG_INFINITY } else { r }
            };
            order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
            order.truncate(k);
            order.sort_unstable();
            order
        }
    };
    if selected.is_empty() {
        return Err(Error::InvalidConfig("voxel selection is empty".into()));
    }
    Ok(selected)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub models: Vec<VoxelModel>,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Decoder {
    /// Weights are `1 / σ̂²` of each selected voxel.
    pub fn new(models: Vec<VoxelModel>, selected: Vec<usize>) -> Result<Self> {
        if selected.is_empty() {
            return Err(Error::InvalidConfig("decoder needs at least one voxel".into()));
        }
        let mut weights = Vec::with_capacity(selected.len());
        for &v in &selected {
            let m = models
                .get(v)
                .ok_or_else(|| invalid_arg(format!("selected voxel {v} has no model")))?;
            let w = 1.0 / m.sigma2_hat;
            if !(w.is_finite() && w > 0.0) {
                return Err(invalid_arg(format!("voxel {v} has noise variance {}", m.sigma2_hat)));
            }
            weights.push(w);
        }
        Ok(Self {
            models,
            selected,
            weights,
        })
    }

    /// Responses restricted to the selected voxels.
    fn selected_responses(&self, responses: &[f64]) -> Result<Vec<f64>> {
        self.selected
            .iter()
            .map(|&v| match responses.get(v) {
                Some(y) if y.is_finite() => Ok(*y),
                _ => Err(invalid_arg(format!("missing response for voxel {v}"))),
            })
            .collect()
    }

    /// `candidates x selected` matrix of predicted responses.
    pub fn predictions(&self, candidates: &FeatureMatrix) -> Result<DMatrix<f64>> {
        let cols = self
            .selected
            .iter()
            .map(|&v| crate::encoding::predict(&self.models[v], candidates))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(candidates.n(), self.selected.len(), |i, k| cols[k][i]))
    }

    fn weighted_error(&self, y: &[f64], mu: impl Iterator<Item = f64>) -> f64 {
        self.weights
            .iter()
            .zip(y)
            .zip(mu)
            .map(|((w, y), m)| w * (y - m).powi(2))
            .sum()
    }
}

/// `Σ_v (1/σ̂_v²)(y_v − μ̂_v(s))²` over the selected voxels; `responses` is
/// indexed by voxel.
pub fn score(decoder: &Decoder, responses: &[f64], s_features: &[f64]) -> Result<f64> {
    let y = decoder.selected_responses(responses)?;
    let p = decoder.models[decoder.selected[0]].p;
    if s_features.len() != p {
        return Err(invalid_arg(format!("feature row has {} entries, expected {p}", s_features.len())));
    }
    let mu = decoder.selected.iter().map(|&v| decoder.models[v].predict_row(s_features));
    Ok(decoder.weighted_error(&y, mu))
}

/// Lowest-index candidate with minimal score.
pub fn decode(decoder: &Decoder, responses: &[f64], candidates: &FeatureMatrix) -> Result<usize> {
    if candidates.n() == 0 {
        return Err(invalid_arg("no candidates"));
    }
    let y = decoder.selected_responses(responses)?;
    let pred = decoder.predictions(candidates)?;
    let scores: Vec<f64> = (0..candidates.n())
        .map(|i| decoder.weighted_error(&y, pred.row(i).iter().copied()))
        .collect();
    Ok(argmin(&scores))
}

fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    best
}

/// Observed responses (rows, indexed by voxel) paired with the features of
/// the image that produced them.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub responses: DMatrix<f64>,
    pub features: FeatureMatrix,
}

impl ValidationSet {
    pub fn new(responses: DMatrix<f64>, features: FeatureMatrix) -> Result<Self> {
        if responses.nrows() != features.n() {
            return Err(invalid_arg(format!(
                "{} response rows for {} validation images",
                responses.nrows(),
                features.n()
            )));
        }
        Ok(Self { responses, features })
    }

    pub fn len(&self) -> usize {
        self.features.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scores of every validation pair against its true image and every
/// database image; each pair is scored against the database exactly once.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub true_scores: Vec<f64>,
    /// `pairs x N`.
    pub database_scores: DMatrix<f64>,
}

impl ScoreTable {
    pub fn build(decoder: &Decoder, validation: &ValidationSet, database: &FeatureMatrix) -> Result<Self> {
        let db_pred = decoder.predictions(database)?;
        let val_pred = decoder.predictions(&validation.features)?;
        let rows = (0..validation.len())
            .into_par_iter()
            .map(|i| {
                let resp: Vec<f64> = validation.responses.row(i).iter().copied().collect();
                let y = decoder.selected_responses(&resp)?;
                let own = decoder.weighted_error(&y, val_pred.row(i).iter().copied());
                let db: Vec<f64> = (0..database.n())
                    .map(|s| decoder.weighted_error(&y, db_pred.row(s).iter().copied()))
                    .collect();
                Ok((own, db))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = database.n();
        let database_scores = DMatrix::from_fn(rows.len(), n, |i, s| rows[i].1[s]);
        Ok(Self {
            true_scores: rows.into_iter().map(|r| r.0).collect(),
            database_scores,
        })
    }

    /// Database images each true image strictly beats.
    pub fn beat_counts(&self) -> Vec<usize> {
        (0..self.true_scores.len())
            .map(|i| {
                let t = self.true_scores[i];
                self.database_scores.row(i).iter().filter(|&&s| t < s).count()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationResult {
    pub beat_counts: Vec<usize>,
    pub database_size: usize,
    pub b_grid: Vec<usize>,
    /// Average identification error at each `b`.
    pub errors: Vec<f64>,
}

impl IdentificationResult {
    pub fn from_beat_counts(beat_counts: Vec<usize>, database_size: usize, b_grid: &[usize]) -> Result<Self> {
        if beat_counts.is_empty() {
            return Err(invalid_arg("no validation pairs"));
        }
        if let Some(&b) = b_grid.iter().find(|&&b| b > database_size) {
            return Err(invalid_arg(format!("b = {b} exceeds database size {database_size}")));
        }
        if let Some(&m) = beat_counts.iter().find(|&&m| m > database_size) {
            return Err(invalid_arg(format!("beat count {m} exceeds database size {database_size}")));
        }
        let errors = b_grid
            .iter()
            .map(|&b| {
                let mean_correct = beat_counts
                    .iter()
                    .map(|&m| prob_all_beaten(m, database_size, b))
                    .sum::<f64>()
                    / beat_counts.len() as f64;
                (1.0 - mean_correct).clamp(0.0, 1.0)
            })
            .collect();
        Ok(Self {
            beat_counts,
            database_size,
            b_grid: b_grid.to_vec(),
            errors,
        })
    }

    pub fn error_at(&self, b: usize) -> Option<f64> {
        self.b_grid.iter().position(|&g| g == b).map(|i| self.errors[i])
    }

    pub fn is_monotone(&self) -> bool {
        let mut pairs: Vec<(usize, f64)> = self.b_grid.iter().copied().zip(self.errors.iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        pairs.windows(2).all(|w| w[1].1 >= w[0].1)
    }

    /// `(b, average_error)` rows.
    pub fn write_error_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "b,average_error")?;
        for (b, e) in self.b_grid.iter().zip(&self.errors) {
            writeln!(out, "{b},{e:.12}")?;
        }
        Ok(())
    }

    /// `(pair_id, M, N)` rows.
    pub fn write_pairs_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "pair_id,M,N")?;
        for (i, m) in self.beat_counts.iter().enumerate() {
            writeln!(out, "{i},{m},{}", self.database_size)?;
        }
        Ok(())
    }
}

/// `C(M, b) / C(N, b)`: chance that all `b` candidates drawn without
/// replacement from `N` fall among the `M` the true image beats.
pub fn prob_all_beaten(m: usize, n: usize, b: usize) -> f64 {
    if b == 0 {
        return 1.0;
    }
    if b > m {
        return 0.0;
    }
    if m == n {
        return 1.0;
    }
    (ln_binomial(m as u64, b as u64) - ln_binomial(n as u64, b as u64)).exp()
}

pub fn exact_id_error(
    decoder: &Decoder,
    validation: &ValidationSet,
    database: &FeatureMatrix,
    b_grid: &[usize],
) -> Result<IdentificationResult> {
    if let Some(&b) = b_grid.iter().find(|&&b| b > database.n()) {
        return Err(invalid_arg(format!("b = {b} exceeds database size {}", database.n())));
    }
    let table = ScoreTable::build(decoder, validation, database)?;
    IdentificationResult::from_beat_counts(table.beat_counts(), database.n(), b_grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub error: f64,
    pub std_error: f64,
    /// Draws per validation pair.
    pub draws: usize,
}

pub fn mc_id_error(
    decoder: &Decoder,
    validation: &ValidationSet,
    database: &FeatureMatrix,
    b: usize,
    draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    let table = ScoreTable::build(decoder, validation, database)?;
    mc_from_table(&table, b, draws, seed)
}

/// Monte Carlo identification error from precomputed scores.
///
/// Each draw samples `b` database images without replacement and decodes
/// among them plus the true image, placed last so that a tie is a failure.
/// Draws for pair `i` come from stream `(seed, i)`.
pub fn mc_from_table(table: &ScoreTable, b: usize, draws: usize, seed: u64) -> Result<McEstimate> {
    if draws == 0 {
        return Err(invalid_arg("draws must be >= 1"));
    }
    let n = table.database_scores.ncols();
    if b > n {
        return Err(invalid_arg(format!("b = {b} exceeds database size {n}")));
    }
    let per_pair: Vec<f64> = (0..table.true_scores.len())
        .into_par_iter()
        .map(|i| {
            let t = table.true_scores[i];
            let row: Vec<f64> = table.database_scores.row(i).iter().copied().collect();
            if b == 0 || row.iter().all(|&s| t < s) {
                return 0.0;
            }
            let mut rng = rng::stream(seed, i as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            let mut swaps = Vec::with_capacity(b);
            let mut failures = 0usize;
            for _ in 0..draws {
                // Partial Fisher-Yates, stopping at the first candidate the
                // true image does not beat; swaps are undone afterwards.
                for k in 0..b {
                    let j = rng.gen_range(k..n);
                    idx.swap(k, j);
                    swaps.push(j);
                    if row[idx[k]] <= t {
                        failures += 1;
                        break;
                    }
                }
                while let Some(j) = swaps.pop() {
                    let k = swaps.len();
                    idx.swap(k, j);
                }
            }
            failures as f64 / draws as f64
        })
        .collect();
    let pairs = per_pair.len() as f64;
    let error = per_pair.iter().sum::<f64>() / pairs;
    let var: f64 = per_pair.iter().map(|p| p * (1.0 - p)).sum::<f64>() / draws as f64;
    Ok(McEstimate {
        error,
        std_error: var.sqrt() / pairs,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{FittedModel, ModelKind};
    use crate::gabor::Transform;
    use crate::sparse_fit::Standardization;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Linear voxel `y = b0 + Σ β_j √x_j` over raw features.
    fn linear_voxel(p: usize, coefs: Vec<f64>, sigma2: f64, r2: f64) -> VoxelModel {
        VoxelModel {
            kind: ModelKind::SqrtX,
            p,
            bank_hash: "bank".into(),
            screened: (0..p).collect(),
            standardization: Some(Standardization {
                center: vec![0.0; p],
                scale: vec![1.0; p],
            }),
            fit: FittedModel::Linear {
                intercept: 0.5,
                coefficients: coefs,
            },
            lambda: 0.0,
            rss: 1.0,
            sigma2_hat: sigma2,
            train_r2: r2,
            df: 1.0,
            n_train: 100,
            converged: true,
            flags: Vec::new(),
        }
    }

    fn population(seed: u64, voxels: usize, p: usize) -> Vec<VoxelModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..voxels)
            .map(|_| {
                let c = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
                linear_voxel(p, c, rng.gen_range(0.5..2.0), rng.gen_range(0.0..1.0))
            })
            .collect()
    }

    fn features(seed: u64, n: usize, p: usize) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(DMatrix::from_fn(n, p, |_, _| rng.gen_range(0.0..4.0)), Transform::Raw, "bank").unwrap()
    }

    #[test]
    fn selection_rules() {
        let models = population(1, 10, 3);
        assert_eq!(select_voxels(&models, VoxelSelection::Threshold(-1.0)).unwrap().len(), 10);
        assert_eq!(select_voxels(&models, VoxelSelection::TopK(10)).unwrap().len(), 10);
        assert!(select_voxels(&models, VoxelSelection::Threshold(2.0)).is_err());
        assert!(select_voxels(&models, VoxelSelection::TopK(0)).is_err());
        let mut tied = models.clone();
        for m in &mut tied {
            m.train_r2 = 0.3;
        }
        assert_eq!(select_voxels(&tied, VoxelSelection::TopK(3)).unwrap(), vec![0, 1, 2]);
        let top = select_voxels(&models, VoxelSelection::TopK(4)).unwrap();
        let min_kept = top.iter().map(|&v| models[v].train_r2).fold(f64::MAX, f64::min);
        assert!((0..10).filter(|v| !top.contains(v)).all(|v| models[v].train_r2 <= min_kept));
    }

    #[test]
    fn score_matches_formula_and_decode_finds_source() {
        let models = population(2, 6, 4);
        let dec = Decoder::new(models.clone(), vec![0, 2, 3, 5]).unwrap();
        let cands = features(3, 25, 4);
        let target = 17;
        let row = cands.row(target);
        let responses: Vec<f64> = models.iter().map(|m| m.predict_row(&row)).collect();
        assert_eq!(score(&dec, &responses, &row).unwrap(), 0.0);
        assert_eq!(decode(&dec, &responses, &cands).unwrap(), target);

        let noisy: Vec<f64> = responses.iter().enumerate().map(|(v, y)| y + 0.1 * v as f64).collect();
        let other = cands.row(3);
        let mut direct = 0.0;
        for &v in &dec.selected {
            let FittedModel::Linear { intercept, coefficients } = &models[v].fit else { unreachable!() };
            let mu = intercept + coefficients.iter().zip(&other).map(|(b, x)| b * x.sqrt()).sum::<f64>();
            direct += (noisy[v] - mu).powi(2) / models[v].sigma2_hat;
        }
        assert!((score(&dec, &noisy, &other).unwrap() - direct).abs() < 1e-12 * (1.0 + direct));
        assert!(score(&dec, &noisy[..4], &other).is_err());
    }

    #[test]
    fn decode_agrees_with_exhaustive_loop_and_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..100 {
            let models = population(100 + case, 5, 3);
            let dec = Decoder::new(models.clone(), vec![0, 1, 2, 3, 4]).unwrap();
            let cands = features(200 + case, 1 + case as usize % 20, 3);
            let resp: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut best = (0, f64::INFINITY);
            for i in 0..cands.n() {
                let s = score(&dec, &resp, &cands.row(i)).unwrap();
                if s < best.1 {
                    best = (i, s);
                }
            }
            assert_eq!(decode(&dec, &resp, &cands).unwrap(), best.0);
            let scaled: Vec<VoxelModel> = models
                .iter()
                .map(|m| VoxelModel { sigma2_hat: m.sigma2_hat * 3.7, ..m.clone() })
                .collect();
            let dec2 = Decoder::new(scaled, vec![0, 1, 2, 3, 4]).unwrap();
            assert_eq!(decode(&dec2, &resp, &cands).unwrap(), best.0);
        }
        let dec = Decoder::new(population(5, 2, 2), vec![0]).unwrap();
        assert_eq!(decode(&dec, &[0.0, 0.0], &features(6, 1, 2)).unwrap(), 0);
    }

    #[test]
    fn hypergeometric_limits() {
        assert_eq!(prob_all_beaten(50, 50, 20), 1.0);
        assert!((prob_all_beaten(30, 50, 1) - 0.6).abs() < 1e-12);
        assert_eq!(prob_all_beaten(49, 50, 50), 0.0);
        assert!((prob_all_beaten(5, 8, 3) - 10.0 / 56.0).abs() < 1e-12);
        let r = IdentificationResult::from_beat_counts(vec![10, 7, 3, 10], 10, &[0, 1, 2, 5, 10]).unwrap();
        assert!(r.is_monotone());
        assert_eq!(r.error_at(0), Some(0.0));
        assert!((r.error_at(10).unwrap() - 0.5).abs() < 1e-15);
        assert!(IdentificationResult::from_beat_counts(vec![3], 10, &[11]).is_err());
    }

    #[test]
    fn ties_are_failures() {
        // Two identical database images equal to the true image.
        let models = population(7, 3, 2);
        let dec = Decoder::new(models.clone(), vec![0, 1, 2]).unwrap();
        let db = features(8, 5, 2);
        let truth = FeatureMatrix::new(DMatrix::from_fn(1, 2, |_, j| db.values[(2, j)]), Transform::Raw, "bank").unwrap();
        let resp = DMatrix::from_fn(1, 3, |_, v| models[v].predict_row(&truth.row(0)));
        let val = ValidationSet::new(resp, truth).unwrap();
        let r = exact_id_error(&dec, &val, &db, &[5]).unwrap();
        assert_eq!(r.beat_counts, vec![4]);
        assert_eq!(r.errors, vec![1.0]);
        let mc = mc_id_error(&dec, &val, &db, 5, 200, 1).unwrap();
        assert_eq!(mc.error, 1.0);
    }

    #[test]
    fn monte_carlo_tracks_exact_error() {
        let models = population(9, 8, 3);
        let dec = Decoder::new(models.clone(), (0..8).collect()).unwrap();
        let db = features(10, 60, 3);
        let truth = features(11, 12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let resp = DMatrix::from_fn(12, 8, |i, v| models[v].predict_row(&truth.row(i)) + rng.gen_range(-1.5..1.5));
        let val = ValidationSet::new(resp, truth).unwrap();
        let grid = [0, 1, 5, 20, 60];
        let exact = exact_id_error(&dec, &val, &db, &grid).unwrap();
        assert!(exact.is_monotone());
        for &b in &grid {
            let mc = mc_id_error(&dec, &val, &db, b, 20_000, 3).unwrap();
            let e = exact.error_at(b).unwrap();
            assert!((mc.error - e).abs() <= 4.0 * mc.std_error + 1e-12, "b={b} mc={mc:?} exact={e}");
        }
        assert_eq!(mc_id_error(&dec, &val, &db, 5, 1000, 4).unwrap(), mc_id_error(&dec, &val, &db, 5, 1000, 4).unwrap());
        assert!(mc_id_error(&dec, &val, &db, 61, 10, 4).is_err());
    }
}
