//! End-to-end tests of the command-line surface, run against the real
//! binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dynafuse::dataprep::Label;
use dynafuse::volume::save_grayscale;
use ndarray::Array2;
use rand::Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dynafuse"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn dynafuse");
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Write a slice stack whose intensity ramps with slice index.
fn write_volume(dir: &Path, seed: u64, t_slices: usize, reversed: bool) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = dynafuse::rng::stream(seed, "cli-test-volume");
    let base = Array2::from_shape_fn((16, 16), |(_, x)| {
        0.2 + 0.5 * x as f64 / 15.0 + rng.gen_range(-0.05..0.05)
    });
    for t in 0..t_slices {
        let level = if reversed {
            (t_slices - 1 - t) as f64
        } else {
            t as f64
        } / t_slices as f64;
        let slice = base.mapv(|v| (v * (0.3 + 0.7 * level)).clamp(0.0, 1.0));
        save_grayscale(dir.join(format!("slice_{t:02}.png")), &slice).unwrap();
    }
}

#[test]
fn pool_emits_png_and_sidecar_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let vol = tmp.path().join("stack_a");
    write_volume(&vol, 1, 3, false);
    let out = tmp.path().join("pooled");

    run_ok(bin().args(["pool"]).arg(&vol).arg("--out").arg(&out));
    let png = out.join("stack_a.png");
    let json = out.join("stack_a.json");
    assert!(png.exists() && json.exists());
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(sidecar["t"], 3);
    assert_eq!(sidecar["source_id"], "stack_a");
    assert!(sidecar["final_objective"].as_f64().unwrap() <= 1.0);

    // Re-running reproduces byte-identical outputs.
    let first_png = std::fs::read(&png).unwrap();
    let first_json = std::fs::read(&json).unwrap();
    run_ok(bin().args(["pool"]).arg(&vol).arg("--out").arg(&out));
    assert_eq!(std::fs::read(&png).unwrap(), first_png);
    assert_eq!(std::fs::read(&json).unwrap(), first_json);
}

#[test]
fn pool_rejects_single_slice_stack() {
    let tmp = tempfile::tempdir().unwrap();
    let vol = tmp.path().join("single");
    write_volume(&vol, 2, 1, false);
    let out = bin()
        .args(["pool"])
        .arg(&vol)
        .arg("--out")
        .arg(tmp.path().join("pooled"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("T < 2"), "stderr: {stderr}");
}

#[test]
fn pooling_reversed_stack_changes_the_image() {
    let tmp = tempfile::tempdir().unwrap();
    let fwd = tmp.path().join("fwd");
    let rev = tmp.path().join("rev");
    write_volume(&fwd, 3, 4, false);
    write_volume(&rev, 3, 4, true);
    let out = tmp.path().join("pooled");
    run_ok(
        bin()
            .args(["pool"])
            .arg(&fwd)
            .arg(&rev)
            .arg("--out")
            .arg(&out),
    );
    let a = std::fs::read(out.join("fwd.png")).unwrap();
    let b = std::fs::read(out.join("rev.png")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn pool_approx_flag_works() {
    let tmp = tempfile::tempdir().unwrap();
    let vol = tmp.path().join("stack");
    write_volume(&vol, 4, 4, false);
    let exact = tmp.path().join("exact");
    let approx = tmp.path().join("approx");
    run_ok(bin().args(["pool"]).arg(&vol).arg("--out").arg(&exact));
    run_ok(
        bin()
            .args(["pool", "--approx"])
            .arg(&vol)
            .arg("--out")
            .arg(&approx),
    );
    assert!(approx.join("stack.png").exists());
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(approx.join("stack.json")).unwrap()).unwrap();
    assert_eq!(sidecar["iterations"], 0);
}

/// Lay out a small paired dataset: one 16x16 still image and one 3-slice
/// stack per record, 8 patients, and the manifest CSV tying them together.
fn write_dataset(root: &Path, n_patients: usize) -> PathBuf {
    let mut rng = dynafuse::rng::stream(9, "cli-test-dataset");
    let mut manifest = String::from("patient_id,view,label,dm_path,dbt_path\n");
    for p in 0..n_patients {
        let label = if p % 2 == 0 {
            Label::Benign
        } else {
            Label::Malignant
        };
        let pid = format!("pat{p:02}");
        let dm_path = root.join(format!("{pid}_dm.png"));
        let dm = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0..1.0));
        save_grayscale(&dm_path, &dm).unwrap();
        let vol_dir = root.join(format!("{pid}_dbt"));
        write_volume(&vol_dir, 100 + p as u64, 3, label == Label::Malignant);
        manifest.push_str(&format!(
            "{pid},CC,{},{},{}\n",
            label.as_str(),
            dm_path.display(),
            vol_dir.display()
        ));
    }
    let path = root.join("manifest.csv");
    std::fs::write(&path, manifest).unwrap();
    path
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let manifest = write_dataset(root, 8);
    let dfi = root.join("dfi");
    let split = root.join("split.json");
    let feat = root.join("features");
    let weights = root.join("weights_dm");
    let preds = root.join("preds_dm.csv");

    run_ok(
        bin()
            .args(["pool", "--manifest"])
            .arg(&manifest)
            .arg("--out")
            .arg(&dfi)
            .args(["--workers", "2"]),
    );
    for i in 0..8 {
        assert!(dfi.join(format!("s{i:04}.png")).exists());
    }

    run_ok(
        bin()
            .args(["prep", "--manifest"])
            .arg(&manifest)
            .args(["--seed", "3", "--out"])
            .arg(&split),
    );
    let split_json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&split).unwrap()).unwrap();
    let train_n = split_json["train"].as_array().unwrap().len();
    let test_n = split_json["test"].as_array().unwrap().len();
    assert_eq!(train_n + test_n, 8);
    assert_eq!(test_n, 2);

    run_ok(
        bin()
            .args(["extract", "--manifest"])
            .arg(&manifest)
            .arg("--dfi-dir")
            .arg(&dfi)
            .arg("--out")
            .arg(&feat)
            .args([
                "--channels",
                "4,8",
                "--target",
                "16",
                "--extractor-seed",
                "7",
                "--augment",
            ]),
    );
    assert!(feat.join("index.csv").exists());
    assert!(feat.join("s0000.orig.dm.tnsr").exists());
    assert!(feat.join("s0000.orig.dbt.tnsr").exists());
    // Five augmentation variants per record, header plus 8 * 5 rows.
    assert!(feat.join("s0000.rot270.dm.tnsr").exists());
    let index = std::fs::read_to_string(feat.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 8 * 5);

    run_ok(
        bin()
            .args(["train", "--features"])
            .arg(&feat)
            .arg("--split")
            .arg(&split)
            .args([
                "--classifier",
                "dm",
                "--epochs",
                "2",
                "--seed",
                "5",
                "--out",
            ])
            .arg(&weights),
    );
    assert!(weights.join("spec.json").exists());
    assert!(weights.join("loss.csv").exists());

    run_ok(
        bin()
            .args(["predict", "--features"])
            .arg(&feat)
            .arg("--split")
            .arg(&split)
            .arg("--weights")
            .arg(&weights)
            .args(["--classifier", "dm", "--out"])
            .arg(&preds),
    );
    let rows = dynafuse::predictions::read_prediction_csv(&preds).unwrap();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert!(row.label.is_some());
        assert!((row.prob_0 + row.prob_1 - 1.0).abs() < 1e-9);
    }

    // A degenerate but structurally complete ensemble of the same file
    // three times, then evaluation of its output.
    let ens = root.join("ensemble.csv");
    run_ok(
        bin()
            .args(["ensemble", "--inputs"])
            .arg(&preds)
            .arg(&preds)
            .arg(&preds)
            .args(["--weights", "1,1,2", "--out"])
            .arg(&ens),
    );
    let report_path = root.join("report.json");
    let out = run_ok(
        bin()
            .args(["evaluate", "--predictions"])
            .arg(&ens)
            .args(["--name", "ens"])
            .arg("--out")
            .arg(&report_path),
    );
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("ens"), "table: {table}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(report["n_samples"], 2);
    assert_eq!(report["positive_class"], "malignant");
}

#[test]
fn extract_imports_precomputed_feature_maps() {
    use dynafuse::features::{export_feature_map, FeatureMap, Modality};
    use ndarray::Array3;

    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let manifest = write_dataset(root, 4);
    let import = root.join("precomputed");
    std::fs::create_dir_all(&import).unwrap();
    let mut rng = dynafuse::rng::stream(5, "import-test");
    for i in 0..4 {
        for (suffix, modality) in [("dm", Modality::DM), ("dbt", Modality::DBT)] {
            let map = FeatureMap::new(
                Array3::from_shape_fn((3, 3, 4), |_| rng.gen_range(-1.0f32..1.0)),
                modality,
            )
            .unwrap();
            export_feature_map(&map, import.join(format!("s{i:04}.{suffix}.tnsr"))).unwrap();
        }
    }
    let feat = root.join("features");
    run_ok(
        bin()
            .args(["extract", "--manifest"])
            .arg(&manifest)
            .arg("--import-dir")
            .arg(&import)
            .arg("--out")
            .arg(&feat),
    );
    assert!(feat.join("s0003.orig.dbt.tnsr").exists());
    let index = std::fs::read_to_string(feat.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 4);

    // A corrupt precomputed file fails cleanly.
    std::fs::write(import.join("s0000.dm.tnsr"), b"garbage").unwrap();
    let out = bin()
        .args(["extract", "--manifest"])
        .arg(&manifest)
        .arg("--import-dir")
        .arg(&import)
        .arg("--out")
        .arg(root.join("features2"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn demo_writes_reports_and_is_bit_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        run_ok(
            bin()
                .args([
                    "demo",
                    "--seed",
                    "11",
                    "--patients",
                    "24",
                    "--epochs",
                    "2",
                    "--out",
                ])
                .arg(out),
        );
    }
    for name in ["dm", "dbt", "dm_dbt", "ensemble"] {
        let report = out_a.join(format!("report_{name}.json"));
        assert!(report.exists());
        assert_eq!(
            std::fs::read(&report).unwrap(),
            std::fs::read(out_b.join(format!("report_{name}.json"))).unwrap(),
            "report {name} not bit-stable"
        );
        assert_eq!(
            std::fs::read(out_a.join(format!("predictions_{name}.csv"))).unwrap(),
            std::fs::read(out_b.join(format!("predictions_{name}.csv"))).unwrap(),
            "predictions {name} not bit-stable"
        );
    }
}

#[test]
fn config_file_values_are_used_and_overridable() {
    let tmp = tempfile::tempdir().unwrap();
    let vol = tmp.path().join("stack");
    write_volume(&vol, 6, 3, false);
    let config_path = tmp.path().join("config.toml");
    std::fs::write(&config_path, "[rankpool]\nlambda = 2.5\nmax_iters = 7\n").unwrap();
    let out = tmp.path().join("pooled");
    run_ok(
        bin()
            .arg("--config")
            .arg(&config_path)
            .args(["pool"])
            .arg(&vol)
            .arg("--out")
            .arg(&out),
    );
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("stack.json")).unwrap()).unwrap();
    assert_eq!(sidecar["lambda"], 2.5);

    // Flag beats config.
    let out2 = tmp.path().join("pooled2");
    run_ok(
        bin()
            .arg("--config")
            .arg(&config_path)
            .args(["pool", "--lambda", "0.5"])
            .arg(&vol)
            .arg("--out")
            .arg(&out2),
    );
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out2.join("stack.json")).unwrap()).unwrap();
    assert_eq!(sidecar["lambda"], 0.5);
}

#[test]
fn unknown_subcommand_fails_with_nonzero_exit() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
}
