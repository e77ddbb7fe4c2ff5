use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use brainex::config::PipelineConfig;
use brainex::nifti;
use brainex::seeds::subject_seed;
use brainex_core::phantom::{generate_phantom, PhantomConfig};
use brainex_core::{Grid, LabelVolume, ProbVolume, Volume3D};
use tempfile::TempDir;

fn brainex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainex")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = brainex(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A config for 32x32x24 phantoms and short training runs.
fn small_config(dir: &Path, iterations: usize) -> PathBuf {
    let mut cfg = PipelineConfig::default();
    cfg.phantom = PhantomConfig::default().rescaled([32, 32, 24]);
    cfg.variation = cfg.variation.scaled(0.5);
    cfg.train.iterations = iterations;
    cfg.data_dir = dir.join("data");
    cfg.output_dir = dir.join("out");
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(brainex(&["--help"]).status.code(), Some(0));
    assert_eq!(brainex(&[]).status.code(), Some(1));
    assert_eq!(brainex(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(brainex(&["refine", "--filter", "fastest"]).status.code(), Some(1));
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "folds = 1\n").unwrap();
    let out = brainex(&["--config", s(&bad), "phantom", "--count", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("folds"));
}

#[test]
fn runtime_failures_exit_two_with_context() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.nii");
    let out = brainex(&[
        "predict",
        "--weights",
        s(&missing),
        "--input",
        s(&missing),
        "--out-prob",
        "p.nii",
        "--out-uncertainty",
        "u.nii",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.nii"));
    assert!(out.stdout.is_empty());
}

#[test]
fn phantom_writes_pairs_and_manifest_deterministically() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), 10);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["--config", s(&cfg), "--seed", "40", "phantom", "--count", "3", "--out", s(out)]);
    }
    let mut names: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".nii")).count(), 6);
    assert!(names.contains(&"manifest.json".to_string()));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest.as_array().unwrap();
    assert_eq!(entries.len(), 3);
    for (i, e) in entries.iter().enumerate() {
        assert_eq!(e["seed"].as_u64().unwrap(), subject_seed(40, i));
        assert_eq!(e["seed"].as_u64().unwrap(), 40 + i as u64);
        assert!(a.join(e["image"].as_str().unwrap()).exists());
    }
}

fn train_fold(cfg: &Path, data: &Path, fold: usize, out: &Path) {
    ok(&[
        "--config",
        s(cfg),
        "train",
        "--manifest",
        s(&data.join("manifest.json")),
        "--fold",
        &fold.to_string(),
        "--out",
        s(out),
    ]);
}

#[test]
fn train_is_deterministic_and_reduces_loss() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), 200);
    let data = dir.path().join("data");
    ok(&["--config", s(&cfg), "phantom", "--count", "10"]);
    let (w1, w2) = (dir.path().join("r1/weights.bseg"), dir.path().join("r2/weights.bseg"));
    train_fold(&cfg, &data, 1, &w1);
    train_fold(&cfg, &data, 1, &w2);
    assert_eq!(fs::read(&w1).unwrap(), fs::read(&w2).unwrap());
    assert_eq!(&fs::read(&w1).unwrap()[..6], b"BSEGW1");

    let split: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("r1/split.json")).unwrap()).unwrap();
    let train: Vec<u64> = split["train"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    let test: Vec<u64> = split["test"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!((train.len(), test.len()), (5, 5));
    assert!(train.iter().all(|i| !test.contains(i)));

    let mut log = csv::Reader::from_path(dir.path().join("r1/train_log.csv")).unwrap();
    let header: Vec<String> = log.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["iteration", "epoch", "loss", "accuracy_0", "accuracy_1"]);
    let losses: Vec<f64> = log.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(losses.len(), 200);
    let tail = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < losses[0], "final loss {tail} vs initial {}", losses[0]);

    let out = brainex(&["--config", s(&cfg), "train", "--manifest", s(&data.join("manifest.json")), "--fold", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

fn read_raw(path: &Path) -> nifti::NiftiImage {
    nifti::decode(&fs::read(path).unwrap(), 4).unwrap()
}

#[test]
fn predict_refine_eval_round() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = small_config(d, 400);
    ok(&["--config", s(&cfg), "phantom", "--count", "4"]);
    let data = d.join("data");
    let weights = d.join("w.bseg");
    train_fold(&cfg, &data, 0, &weights);
    let image = data.join("phantom_000_img.nii");
    let reference = data.join("phantom_000_mask.nii");
    let (prob, unc, samples) = (d.join("prob.nii"), d.join("unc.nii"), d.join("samples"));
    ok(&[
        "--config",
        s(&cfg),
        "--seed",
        "9",
        "predict",
        "--weights",
        s(&weights),
        "--input",
        s(&image),
        "--samples",
        "4",
        "--out-prob",
        s(&prob),
        "--out-uncertainty",
        s(&unc),
        "--dump-samples",
        s(&samples),
    ]);
    let p = read_raw(&prob);
    assert_eq!(p.volumes, 2);
    let n = p.grid.len();
    assert!((0..n).all(|v| (p.data[v] + p.data[n + v] - 1.0).abs() <= 1e-5));
    let dumped: Vec<Vec<f64>> = (0..4).map(|t| read_raw(&samples.join(format!("sample_{t:03}.nii"))).data).collect();
    let worst = (0..2 * n)
        .map(|i| (dumped.iter().map(|s| s[i]).sum::<f64>() / 4.0 - p.data[i]).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "mean of dumped samples differs by {worst}");
    assert!(read_raw(&unc).data.iter().any(|&u| u > 0.0));

    let unc1 = d.join("unc1.nii");
    ok(&[
        "--config",
        s(&cfg),
        "predict",
        "--weights",
        s(&weights),
        "--input",
        s(&image),
        "--samples",
        "1",
        "--out-prob",
        s(&d.join("prob1.nii")),
        "--out-uncertainty",
        s(&unc1),
    ]);
    assert!(read_raw(&unc1).data.iter().all(|&u| u == 0.0));

    let (rprob, rmask) = (d.join("rprob.nii"), d.join("rmask.nii"));
    let refine = |iters: &str| {
        ok(&[
            "refine",
            "--prob",
            s(&prob),
            "--image",
            s(&image),
            "--iters",
            iters,
            "--out-prob",
            s(&rprob),
            "--out-mask",
            s(&rmask),
        ]);
    };
    refine("0");
    let argmax = nifti::read_probs(&prob).unwrap().argmax();
    assert_eq!(nifti::read_labels(&rmask, 2).unwrap(), argmax);
    refine("5");
    let refined = nifti::read_labels(&rmask, 2).unwrap();

    let report = d.join("report.json");
    ok(&["eval", "--mask", s(&rmask), "--reference", s(&reference), "--uncertainty", s(&unc), "--out", s(&report)]);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        ["assd_mm", "dice", "fn", "fp", "hd_mm", "sensitivity", "specificity", "tn", "total_uncertainty", "tp"]
    );
    let truth = nifti::read_labels(&reference, 2).unwrap();
    let c = brainex_core::metrics::confusion(&refined, &truth).unwrap();
    assert_eq!(json["tp"].as_u64().unwrap(), c.tp);

    ok(&["eval", "--mask", s(&reference), "--reference", s(&reference), "--out", s(&report)]);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["dice"].as_f64(), Some(1.0));
    assert!(json["total_uncertainty"].is_null());

    let mut bad = fs::read(&weights).unwrap();
    bad.truncate(bad.len() - 8);
    let bad_path = d.join("bad.bseg");
    fs::write(&bad_path, bad).unwrap();
    let out = brainex(&[
        "predict",
        "--weights",
        s(&bad_path),
        "--input",
        s(&image),
        "--out-prob",
        s(&prob),
        "--out-uncertainty",
        s(&unc),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.bseg"));
}

#[test]
fn refine_defaults_and_filters() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (image, mask) = generate_phantom(&PhantomConfig::default()).unwrap();
    let g = Grid::new([24, 24, 16], image.spacing()).unwrap();
    let o = [20, 34, 12];
    let crop = Volume3D::from_fn(g, |x, y, z| image.get(x + o[0], y + o[1], z + o[2])).unwrap();
    let truth = LabelVolume::mask_from_fn(g, |x, y, z| mask.get(x + o[0], y + o[1], z + o[2]) == 1);
    let probs: Vec<f64> = (0..g.len())
        .flat_map(|i| {
            let wobble = ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5;
            let p = if truth.data()[i] == 1 { 0.7 } else { 0.3 } + 0.5 * wobble;
            [1.0 - p, p]
        })
        .collect();
    let (img_path, prob_path) = (d.join("img.nii"), d.join("prob.nii"));
    nifti::write_volume(&crop, &img_path).unwrap();
    nifti::write_probs(&ProbVolume::new(g, 2, probs).unwrap(), &prob_path).unwrap();

    let run = |extra: &[&str], tag: &str| -> LabelVolume {
        let (out_prob, out_mask) = (d.join(format!("{tag}_prob.nii")), d.join(format!("{tag}_mask.nii")));
        let mut args = vec!["refine", "--prob", s(&prob_path), "--image", s(&img_path)];
        args.extend(["--out-prob", s(&out_prob), "--out-mask", s(&out_mask)]);
        args.extend_from_slice(extra);
        ok(&args);
        nifti::read_labels(&out_mask, 2).unwrap()
    };
    let default = run(&[], "default");
    let explicit = run(
        &["--w1", "3", "--w2", "1", "--theta-alpha", "4", "--theta-beta", "1", "--theta-gamma", "4", "--iters", "5"],
        "explicit",
    );
    assert_eq!(default, explicit);
    let naive = run(&["--filter", "naive"], "naive");
    let agree = naive.data().iter().zip(default.data()).filter(|(a, b)| a == b).count();
    assert!(agree as f64 >= 0.99 * g.len() as f64, "{agree} of {}", g.len());
    let lattice = run(&["--filter", "lattice"], "lattice");
    assert_eq!(lattice.dims(), default.dims());
    let raw = run(&["--normalization", "none", "--iters", "1"], "raw");
    assert_eq!(raw.dims(), default.dims());
}

#[test]
fn batch_eval_and_stats() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let pc = PhantomConfig::default().rescaled([16, 16, 12]);
    let (_, truth) = generate_phantom(&pc).unwrap();
    let g = *truth.grid();
    let mut masks = Vec::new();
    let mut refs = Vec::new();
    for k in 0..10 {
        let m = LabelVolume::mask_from_fn(g, |x, y, z| {
            let i = g.index(x, y, z);
            (truth.data()[i] == 1) != (i % (13 + k) == 0)
        });
        let (mp, rp) = (d.join(format!("m{k}.nii")), d.join(format!("r{k}.nii")));
        nifti::write_labels(&m, &mp).unwrap();
        nifti::write_labels(&truth, &rp).unwrap();
        masks.push(mp);
        refs.push(rp);
    }
    let (json, csv_path) = (d.join("batch.json"), d.join("batch.csv"));
    let mut args = vec!["eval".to_string(), "--mask".into()];
    args.extend(masks.iter().map(|p| s(p).to_string()));
    args.push("--reference".into());
    args.extend(refs.iter().map(|p| s(p).to_string()));
    args.extend(["--out".into(), s(&json).into(), "--csv".into(), s(&csv_path).into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let reports: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert_eq!(reports.len(), 10);
    let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 12);
    let dices: Vec<f64> = reports.iter().map(|r| r["dice"].as_f64().unwrap()).collect();
    for (row, d) in rows.iter().zip(&dices) {
        assert_eq!(row[1].parse::<f64>().unwrap(), *d);
    }
    let mean = dices.iter().sum::<f64>() / 10.0;
    let std = (dices.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
    assert_eq!(&rows[10][0], "mean");
    assert!((rows[10][1].parse::<f64>().unwrap() - mean).abs() < 1e-12);
    assert_eq!(&rows[11][0], "std");
    assert!((rows[11][1].parse::<f64>().unwrap() - std).abs() < 1e-12);

    let stats = d.join("stats.json");
    let out = brainex(&["stats", "--a", s(&json), "--b", s(&json), "--out", s(&stats)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!stats.exists());

    let shifted: Vec<serde_json::Value> = reports
        .iter()
        .take(6)
        .enumerate()
        .map(|(i, r)| {
            let mut r = r.clone();
            r["dice"] = (r["dice"].as_f64().unwrap() - 0.01 * (i + 1) as f64).into();
            r
        })
        .collect();
    let (a, b) = (d.join("a.json"), d.join("b.json"));
    fs::write(&a, serde_json::to_string(&reports[..6]).unwrap()).unwrap();
    fs::write(&b, serde_json::to_string(&shifted).unwrap()).unwrap();
    ok(&["stats", "--a", s(&a), "--b", s(&b), "--comparisons", "2", "--out", s(&stats)]);
    let result: serde_json::Value = serde_json::from_slice(&fs::read(&stats).unwrap()).unwrap();
    assert_eq!(result["statistic"].as_f64(), Some(0.0));
    assert_eq!(result["p_value"].as_f64(), Some(0.03125));
    assert_eq!(result["p_adjusted"].as_f64(), Some(0.0625));
    assert_eq!(result["method"].as_str(), Some("exact"));
}

#[test]
fn experiment_reports_one_record_per_condition_subject_and_seed() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg_path = small_config(d, 15);
    let mut cfg = PipelineConfig::load(&cfg_path).unwrap();
    cfg.experiment.train_sizes = vec![1, 2];
    cfg.experiment.full_train = 2;
    cfg.experiment.corrupted_counts = vec![0, 1];
    cfg.experiment.rotations = vec![0.0, 20.0];
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let run = |variant: &str| -> Vec<serde_json::Value> {
        let out = d.join(variant);
        ok(&[
            "--config",
            s(&cfg_path),
            "experiment",
            "--variant",
            variant,
            "--repeats",
            "2",
            "--test-subjects",
            "2",
            "--out",
            s(&out),
        ]);
        assert!(out.join("records.csv").exists() && out.join("summary.csv").exists());
        serde_json::from_slice(&fs::read(out.join("records.json")).unwrap()).unwrap()
    };
    let rotation = run("rotation");
    assert_eq!(rotation.len(), 2 * 2 * 2);
    let mut keys: Vec<(String, u64, u64)> = rotation
        .iter()
        .map(|r| (r["condition"].as_str().unwrap().to_string(), r["subject"].as_u64().unwrap(), r["seed"].as_u64().unwrap()))
        .collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 8);

    let corruption = run("label-corruption");
    let plain: Vec<&serde_json::Value> = corruption.iter().filter(|r| r["level"].as_f64() == Some(0.0)).collect();
    let unrotated: Vec<&serde_json::Value> = rotation.iter().filter(|r| r["level"].as_f64() == Some(0.0)).collect();
    assert_eq!(plain.len(), unrotated.len());
    for (a, b) in plain.iter().zip(&unrotated) {
        for key in ["subject", "seed", "dice", "assd_mm", "total_uncertainty", "roi_total_uncertainty"] {
            assert_eq!(a[key], b[key], "{key}");
        }
    }
    let out = brainex(&["--config", s(&cfg_path), "experiment", "--variant", "sideways"]);
    assert_eq!(out.status.code(), Some(1));
}
