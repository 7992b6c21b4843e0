use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "image_size": 16, "levels": 4, "orientations": 4,
  "n_train": 200, "n_valid": 20, "n_database": 100, "n_voxels": 4,
  "fit": {"screen_k": 50, "n_lambda": 20},
  "selection": {"top_k": 3}, "b_grid": [1, 10, 50], "mc_draws": 4000,
  "tune": {"grid_size": 8, "frequencies": [1, 2, 4, 8]},
  "bold": {"n_images": 10, "repeats": 3}
}"#;

struct Run {
    dir: TempDir,
    config: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, config).unwrap();
        Run { dir, config: path }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn vspam(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_vspam"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.out())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.vspam(args);
        assert!(
            o.status.success(),
            "vspam {args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (header, rows) = read_csv(path);
    let c = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[c].parse().unwrap()).collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn array<'a>(m: &'a serde_json::Value, name: &str) -> &'a serde_json::Value {
    m["arrays"]
        .as_array()
        .unwrap()
        .iter()
        .find(|a| a["name"] == name)
        .unwrap_or_else(|| panic!("no array {name}"))
}

#[test]
fn gen_writes_expected_shapes() {
    let run = Run::new(TINY);
    run.ok(&["gen"]);
    let m = manifest(&run.out().join("data"));
    // 4 orientations over levels 0..4: 4 * (1 + 4 + 16 + 64).
    let p = 4 * (1 + 4 + 16 + 64);
    for (set, n) in [("train", 200), ("valid", 20), ("database", 100)] {
        let f = array(&m, &format!("features_{set}"));
        assert_eq!(f["rows"], n);
        assert_eq!(f["cols"], p);
        assert_eq!(f["tags"]["transform"], "raw");
        let s = array(&m, &format!("stimuli_{set}"));
        assert_eq!(s["rows"], n);
        assert_eq!(s["cols"], 16 * 16);
    }
    assert_eq!(array(&m, "responses_train")["cols"], 4);
    assert_eq!(array(&m, "responses_valid")["rows"], 20);
    assert!(run.out().join("population.json").exists());
    assert!(run.out().join("config.json").exists());
}

#[test]
fn gen_is_byte_identical_on_rerun() {
    let a = Run::new(TINY);
    let b = Run::new(TINY);
    a.ok(&["gen"]);
    b.ok(&["gen"]);
    for name in ["features_train.bin", "responses_valid.bin", "stimuli_database.bin", "manifest.json"] {
        let x = fs::read(a.out().join("data").join(name)).unwrap();
        let y = fs::read(b.out().join("data").join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn seed_flag_changes_the_data() {
    let a = Run::new(TINY);
    let b = Run::new(TINY);
    a.ok(&["gen"]);
    b.ok(&["gen", "--seed", "99"]);
    let x = fs::read(a.out().join("data/features_train.bin")).unwrap();
    let y = fs::read(b.out().join("data/features_train.bin")).unwrap();
    assert_ne!(x, y);
}

#[test]
fn full_pipeline() {
    let run = Run::new(TINY);
    run.ok(&["gen"]);
    run.ok(&["fit"]);
    let out = run.out();

    for kind in ["sqrtX", "log1psqrtX", "vspam"] {
        let n = fs::read_dir(out.join("models").join(kind)).unwrap().count();
        assert_eq!(n, 4, "{kind} models");
        let (header, rows) = read_csv(&out.join("paths").join(kind).join("voxel_0000.csv"));
        assert_eq!(header[0], "lambda");
        assert_eq!(rows.len(), 20);
    }

    let report = out.join("encoding_report.csv");
    let (header, rows) = read_csv(&report);
    assert_eq!(rows.len(), 4);
    for col in ["train_r2_sqrtX", "pred_r2_vspam", "diff_vspam_minus_sqrtX"] {
        assert!(header.iter().any(|h| h == col), "missing {col}");
    }
    for r2 in column(&report, "train_r2_vspam") {
        assert!((0.0..=1.0).contains(&r2));
    }

    // decode: grid gains N, errors are probabilities and non-decreasing in b.
    run.ok(&["decode"]);
    for kind in ["sqrtX", "vspam"] {
        let err = out.join("decode").join(format!("{kind}_error.csv"));
        let b = column(&err, "b");
        let e = column(&err, "average_error");
        assert_eq!(b, vec![1.0, 10.0, 50.0, 100.0]);
        assert!(e.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(e.windows(2).all(|w| w[1] >= w[0]), "{kind}: {e:?}");

        let mc = out.join("decode").join(format!("{kind}_mc.csv"));
        let exact = column(&mc, "exact_error");
        let est = column(&mc, "mc_error");
        let se = column(&mc, "mc_std_error");
        for i in 0..exact.len() {
            assert!(
                (exact[i] - est[i]).abs() <= 4.0 * se[i] + 1e-12,
                "{kind} b row {i}: exact {} mc {} se {}",
                exact[i],
                est[i],
                se[i]
            );
        }
        let (_, pairs) = read_csv(&out.join("decode").join(format!("{kind}_pairs.csv")));
        assert_eq!(pairs.len(), 20);
        let (_, sweep) = read_csv(&out.join("decode").join(format!("{kind}_threshold_sweep.csv")));
        assert_eq!(sweep.len(), 6);
    }

    // predict on the default (validation) set.
    let model = out.join("models/sqrtX/voxel_0001.json");
    run.ok(&["predict", "--model", model.to_str().unwrap()]);
    let preds = column(&out.join("predictions/sqrtX_voxel_0001_valid.csv"), "prediction");
    assert_eq!(preds.len(), 20);
    run.ok(&["predict", "--model", model.to_str().unwrap(), "--set", "database"]);
    assert_eq!(column(&out.join("predictions/sqrtX_voxel_0001_database.csv"), "prediction").len(), 100);

    // tune: one row per grid cell, per frequency/orientation pair and per contrast.
    run.ok(&["tune", "--model", model.to_str().unwrap()]);
    let tune = out.join("tune");
    assert_eq!(column(&tune.join("sqrtX_voxel_0001_rf.csv"), "value").len(), 64);
    assert_eq!(column(&tune.join("sqrtX_voxel_0001_orifreq.csv"), "value").len(), 4 * 8);
    assert_eq!(column(&tune.join("sqrtX_voxel_0001_contrast.csv"), "value").len(), 11);
}

#[test]
fn intercept_only_model_has_flat_tuning() {
    let run = Run::new(TINY);
    run.ok(&["gen"]);
    run.ok(&["fit", "--kind", "vspam"]);
    let out = run.out();
    // Hand-build an intercept-only model from a fitted one.
    let path = out.join("models/vspam/voxel_0000.json");
    let mut model: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(model["fit"]["form"], "additive");
    model["fit"]["functions"] = serde_json::json!([]);
    let flat = out.join("flat.json");
    fs::write(&flat, model.to_string()).unwrap();

    run.ok(&["tune", "--model", flat.to_str().unwrap()]);
    for probe in ["rf", "orifreq", "contrast"] {
        let v = column(&out.join(format!("tune/vspam_flat_{probe}.csv")), "value");
        assert!(v.iter().all(|x| (x - v[0]).abs() < 1e-12), "{probe} not constant");
    }
}

#[test]
fn bold_round_trip_noiseless() {
    let cfg = TINY.replace(r#""repeats": 3}"#, r#""repeats": 3, "snr": 0}"#);
    let run = Run::new(&cfg);
    run.ok(&["bold", "sim"]);
    let stdout = run.ok(&["bold", "fit"]);
    assert!(stdout.contains("rss_monotone=true"), "{stdout}");

    let value = |key: &str| -> f64 {
        let tail = stdout.split(&format!("{key}=")).nth(1).unwrap();
        tail.split_whitespace().next().unwrap().parse().unwrap()
    };
    let amp = value("amplitude_correlation");
    let hrf = value("hrf_correlation");
    assert!(amp > 0.999 && hrf > 0.999, "amp {amp} hrf {hrf}");

    let m = manifest(&run.out().join("bold/sim"));
    assert_eq!(array(&m, "truth_amplitudes")["rows"], 10);
    let m = manifest(&run.out().join("bold/fit"));
    assert_eq!(array(&m, "amplitudes")["rows"], 10);
}

#[test]
fn bold_schedule_round_trips() {
    let run = Run::new(TINY);
    run.ok(&["bold", "sim"]);
    let path = run.out().join("bold/schedule.json");
    let text = fs::read_to_string(&path).unwrap();
    let schedule = vspam::bold::EventSchedule::from_json(&text).unwrap();
    assert_eq!(schedule.n_images, 10);
    assert!(schedule.onsets.iter().all(|o| o.len() == 3));
    assert_eq!(schedule.to_json().unwrap().trim_end(), text.trim_end());
}

#[test]
fn exit_codes() {
    let bad = Run::new(r#"{"n_train": 0}"#);
    assert_eq!(bad.vspam(&["gen"]).status.code(), Some(2));

    let garbled = Run::new("{ not json");
    assert_eq!(garbled.vspam(&["gen"]).status.code(), Some(2));

    let run = Run::new(TINY);
    assert_eq!(run.vspam(&["fit"]).status.code(), Some(3), "fit before gen");
    assert_eq!(run.vspam(&["bold", "fit"]).status.code(), Some(3), "bold fit before sim");

    run.ok(&["gen"]);
    fs::write(run.out().join("data/features_train.bin"), b"short").unwrap();
    assert_eq!(run.vspam(&["fit"]).status.code(), Some(3), "truncated bundle");

    let run = Run::new(TINY);
    run.ok(&["gen"]);
    // Two of the four tiny-config voxels come out empty under V-SPAM.
    let o = run.vspam(&["fit", "--kind", "vspam", "--strict"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    run.ok(&["fit", "--kind", "vspam"]);
}
