use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use nalgebra::DMatrix;
use vspam::bold::{correlation, estimate, EventSchedule};
use vspam::bundle::MatrixBundle;
use vspam::config::RunConfig;
use vspam::decoding::ValidationSet;
use vspam::encoding::{self, median, ModelKind, VoxelModel};
use vspam::experiment::{
    build_run_bank, design_population, encoding_report, fit_population, identify, monte_carlo_check, sample_responses,
    simulate_bold, stimulus_seeds, threshold_sweep, write_mc_csv, write_sweep_csv, Features,
};
use vspam::gabor::featurize_set;
use vspam::stimuli::{sample_stimulus_set, Image, StimulusSet};
use vspam::tuning::{contrast_deciles, contrast_tuning, ori_freq_tuning, orientation_grid, spatial_rf};

use crate::layout::Layout;
use crate::{NumericalFailure, StimulusSetName};

const SETS: [StimulusSetName; 3] = [StimulusSetName::Train, StimulusSetName::Valid, StimulusSetName::Database];

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("writing {}", path.display()))?,
    ))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn write_csv(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut f = create(path)?;
    body(&mut f).with_context(|| format!("writing {}", path.display()))?;
    f.flush()?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    if !path.is_file() {
        return Err(vspam::Error::MissingInput(path.to_path_buf()).into());
    }
    Ok(fs::read_to_string(path)?)
}

fn column(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(m.len(), 1, m.as_slice())
}

fn vector(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

pub fn load_model(path: &Path) -> Result<VoxelModel> {
    let text = read_text(path)?;
    VoxelModel::from_json(&text).map_err(|e| vspam::Error::InvalidArgument(format!("{}: {e}", path.display())).into())
}

fn load_models(layout: &Layout, kind: ModelKind, voxels: usize) -> Result<Vec<VoxelModel>> {
    (0..voxels).map(|v| load_model(&layout.model(kind, v))).collect()
}

fn stimulus_matrix(set: &StimulusSet) -> DMatrix<f64> {
    let pixels = set.image_size() * set.image_size();
    let mut data = Vec::with_capacity(set.len() * pixels);
    for img in &set.images {
        data.extend_from_slice(img.pixels());
    }
    DMatrix::from_row_slice(set.len(), pixels, &data)
}

fn seed_tag(seed: u64) -> BTreeMap<String, String> {
    BTreeMap::from([("seed".to_string(), seed.to_string())])
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let bank = build_run_bank(cfg)?;
    let seeds = stimulus_seeds(cfg);
    let counts = [cfg.n_train, cfg.n_valid, cfg.n_database];
    let mut bundle = MatrixBundle::create(layout.data())?;
    let mut features = Vec::new();
    for ((set, n), seed) in SETS.iter().zip(counts).zip(seeds) {
        let stimuli = sample_stimulus_set(cfg.image_size, n, seed, cfg.aperture)?;
        bundle.put(&format!("stimuli_{}", set.tag()), &stimulus_matrix(&stimuli), seed_tag(seed))?;
        let f = featurize_set(&bank, &stimuli)?;
        bundle.put_features(&format!("features_{}", set.tag()), &f, Some(seed))?;
        features.push(f);
    }
    let database = features.pop().expect("three sets");
    let valid = features.pop().expect("three sets");
    let train = features.pop().expect("three sets");
    let features = Features { train, valid, database };
    let specs = design_population(cfg, &bank, &features.train)?;
    let (y_train, y_valid) = sample_responses(&specs, &features)?;
    bundle.put("responses_train", &y_train, seed_tag(cfg.seeds.noise))?;
    bundle.put("responses_valid", &y_valid, seed_tag(cfg.seeds.noise))?;
    bundle.finish()?;
    write_text(&layout.population(), &serde_json::to_string_pretty(&specs)?)?;
    write_text(&layout.config(), &cfg.to_json()?)?;
    println!(
        "bank {} wavelets (hash {}), {} train / {} valid / {} database images, {} voxels -> {}",
        bank.len(),
        bank.hash(),
        cfg.n_train,
        cfg.n_valid,
        cfg.n_database,
        specs.len(),
        layout.data().display()
    );
    Ok(())
}

pub fn fit(cfg: &RunConfig, kinds: &[ModelKind], strict: bool) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let data = MatrixBundle::open(layout.data())?;
    let train = data.get_features("features_train")?;
    let y_train = data.get("responses_train")?;
    let voxels = y_train.ncols();
    let mut errored = 0;
    let mut flagged = 0;
    for &kind in kinds {
        let results = fit_population(&train, &y_train, kind, &cfg.fit)?;
        fs::create_dir_all(layout.models(kind))?;
        let mut r2 = Vec::new();
        for (v, r) in results.into_iter().enumerate() {
            match r {
                Ok(fit) => {
                    if !fit.model.flags.is_empty() {
                        flagged += 1;
                        eprintln!("{kind} voxel {v}: flagged {}", fit.model.flags.join(","));
                    }
                    write_text(&layout.model(kind, v), &fit.model.to_json()?)?;
                    write_csv(&layout.path_csv(kind, v), |w| fit.path.write_csv(w))?;
                    r2.push(fit.model.train_r2);
                }
                Err(e) => {
                    errored += 1;
                    let _ = fs::remove_file(layout.model(kind, v));
                    eprintln!("{kind} voxel {v}: {e}");
                }
            }
        }
        println!(
            "{kind}: {} of {voxels} voxels fitted, median training R² {:.4}",
            r2.len(),
            median(r2).unwrap_or(f64::NAN)
        );
    }

    // The report covers every kind whose models are all present.
    let complete: Vec<ModelKind> = ModelKind::ALL
        .into_iter()
        .filter(|&k| (0..voxels).all(|v| layout.model(k, v).is_file()))
        .collect();
    if !complete.is_empty() {
        let fits = complete
            .iter()
            .map(|&k| Ok((k, load_models(&layout, k, voxels)?)))
            .collect::<Result<Vec<_>>>()?;
        let valid = data.get_features("features_valid")?;
        let y_valid = data.get("responses_valid")?;
        let report = encoding_report(&fits, &train, &valid, &y_train, &y_valid, cfg.loess_span)?;
        write_csv(&layout.report(), |w| report.write_csv(w))?;
        for &k in &complete {
            println!("{k}: median predictive R² {:.4}", report.median_pred_r2(k).unwrap_or(f64::NAN));
        }
    }
    if errored > 0 {
        return Err(NumericalFailure(format!("{errored} voxel fits failed")).into());
    }
    if strict && flagged > 0 {
        return Err(NumericalFailure(format!("{flagged} voxel fits flagged")).into());
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig, model_path: &Path, set: StimulusSetName) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let model = load_model(model_path)?;
    let data = MatrixBundle::open(layout.data())?;
    let features = data.get_features(&format!("features_{}", set.tag()))?;
    let pred = encoding::predict(&model, &features)?;
    let stem = model_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let out = layout.predictions().join(format!("{}_{stem}_{}.csv", model.kind, set.tag()));
    write_csv(&out, |w| {
        writeln!(w, "image,prediction")?;
        for (i, p) in pred.iter().enumerate() {
            writeln!(w, "{i},{p:.12}")?;
        }
        Ok(())
    })?;
    println!("{} predictions -> {}", pred.len(), out.display());
    Ok(())
}

pub fn decode(cfg: &RunConfig, kinds: &[ModelKind]) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let data = MatrixBundle::open(layout.data())?;
    let valid = data.get_features("features_valid")?;
    let y_valid = data.get("responses_valid")?;
    let database = data.get_features("features_database")?;
    let n = database.n();
    let mut grid: Vec<usize> = cfg.b_grid.iter().copied().filter(|&b| b >= 1 && b <= n).collect();
    grid.push(n);
    grid.sort_unstable();
    grid.dedup();
    let voxels = y_valid.ncols();
    let validation = ValidationSet::new(y_valid, valid)?;
    let dir = layout.decode();
    for &kind in kinds {
        let models = load_models(&layout, kind, voxels)?;
        let id = identify(&models, cfg.selection, &validation, &database, &grid)?;
        write_csv(&dir.join(format!("{kind}_error.csv")), |w| id.result.write_error_csv(w))?;
        write_csv(&dir.join(format!("{kind}_pairs.csv")), |w| id.result.write_pairs_csv(w))?;
        let sweep = threshold_sweep(&models, &cfg.threshold_sweep, &validation, &database)?;
        write_csv(&dir.join(format!("{kind}_threshold_sweep.csv")), |w| write_sweep_csv(&sweep, w))?;
        if cfg.mc_draws > 0 {
            let mc = monte_carlo_check(&id, cfg.mc_draws, cfg.seeds.monte_carlo)?;
            write_csv(&dir.join(format!("{kind}_mc.csv")), |w| write_mc_csv(&mc, w))?;
        }
        println!(
            "{kind}: {} voxels selected, identification error {:.4} at b = {n}",
            id.selected.len(),
            id.result.error_at(n).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn training_images(layout: &Layout, size: usize) -> Result<Option<Vec<Image>>> {
    let dir = layout.data();
    if !dir.join(vspam::bundle::MANIFEST).is_file() {
        return Ok(None);
    }
    let data = MatrixBundle::open(dir)?;
    if !data.contains("stimuli_train") {
        return Ok(None);
    }
    let m = data.get("stimuli_train")?;
    if m.ncols() != size * size {
        return Ok(None);
    }
    let images = (0..m.nrows())
        .map(|i| Image::new(size, m.row(i).iter().copied().collect()))
        .collect::<vspam::Result<Vec<_>>>()?;
    Ok(Some(images))
}

pub fn tune(cfg: &RunConfig, model_path: &Path) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let model = load_model(model_path)?;
    let bank = build_run_bank(cfg)?;
    let t = &cfg.tune;
    let rf = spatial_rf(&model, &bank, t.grid_size, t.amplitude)?;
    let of = ori_freq_tuning(&model, &bank, &t.frequencies, &orientation_grid(t.n_orientations), t.phase)?;
    let mut ct = contrast_tuning(&model, &bank, &t.contrasts, cfg.seeds.tuning, t.n_noise)?;
    if let Some(images) = training_images(&layout, cfg.image_size)? {
        ct.contrast_deciles = Some(contrast_deciles(&images)?);
    }
    let stem = model_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let prefix = format!("{}_{stem}", model.kind);
    let dir = layout.tune();
    write_csv(&dir.join(format!("{prefix}_rf.csv")), |w| rf.write_csv(w))?;
    write_csv(&dir.join(format!("{prefix}_orifreq.csv")), |w| of.write_csv(w))?;
    write_csv(&dir.join(format!("{prefix}_contrast.csv")), |w| ct.write_csv(w))?;
    let (ri, rj) = rf.argmax();
    let peak = of.argmax();
    println!(
        "{prefix}: RF peak at pixel ({ri}, {rj}); grating peak at frequency {} orientation {:.4}; outputs in {}",
        peak[0],
        peak[1],
        dir.display()
    );
    Ok(())
}

pub fn bold_sim(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let run = simulate_bold(&cfg.bold, cfg.seeds.bold)?;
    write_text(&layout.schedule(), &run.schedule.to_json()?)?;
    let truth = run.series.truth.as_ref().expect("simulation records its truth");
    let mut b = MatrixBundle::create(layout.bold_sim())?;
    b.put("series", &vector(&run.series.samples), seed_tag(cfg.seeds.bold))?;
    b.put("truth_amplitudes", &vector(&truth.amplitudes), BTreeMap::new())?;
    b.put("truth_hrf", &vector(&truth.hrf.sample(cfg.bold.sample_rate)), BTreeMap::new())?;
    b.put("truth_nuisance", &vector(&truth.nuisance), BTreeMap::new())?;
    b.finish()?;
    write_text(&layout.bold().join("truth.json"), &serde_json::to_string_pretty(truth)?)?;
    println!(
        "{} samples, {} images, noise sd {:.4} -> {}",
        run.series.samples.len(),
        run.schedule.n_images,
        truth.noise_sd,
        layout.bold().display()
    );
    Ok(())
}

pub fn bold_fit(cfg: &RunConfig, strict: bool) -> Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let schedule = EventSchedule::from_json(&read_text(&layout.schedule())?)?;
    let sim = MatrixBundle::open(layout.bold_sim())?;
    let series = sim.get("series")?;
    let fit = estimate(series.as_slice(), &schedule, &cfg.bold.estimate_config())?;
    let hrf = fit.hrf.sample(schedule.sample_rate);
    let mut b = MatrixBundle::create(layout.bold_fit())?;
    b.put("amplitudes", &vector(&fit.amplitudes), BTreeMap::new())?;
    b.put("hrf", &vector(&hrf), BTreeMap::new())?;
    b.put("hrf_coefficients", &vector(&fit.hrf.coefficients), BTreeMap::new())?;
    b.put("nuisance", &vector(&fit.nuisance), BTreeMap::new())?;
    b.put("rss_trace", &vector(&fit.rss_trace), BTreeMap::new())?;
    b.finish()?;
    write_text(&layout.bold().join("fit.json"), &serde_json::to_string_pretty(&fit)?)?;
    let monotone = fit.rss_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
    println!(
        "converged={} iterations={} rss={:.6e} rss_monotone={monotone}",
        fit.converged, fit.iterations, fit.rss
    );
    if sim.contains("truth_amplitudes") {
        let truth_a = column(&sim.get("truth_amplitudes")?);
        let truth_h = column(&sim.get("truth_hrf")?);
        println!(
            "amplitude_correlation={:.6} hrf_correlation={:.6}",
            correlation(&fit.amplitudes, truth_a.as_slice()),
            correlation(&hrf, truth_h.as_slice())
        );
    }
    if strict && !fit.converged {
        return Err(NumericalFailure("amplitude estimation did not converge".into()).into());
    }
    Ok(())
}
