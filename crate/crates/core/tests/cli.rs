use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use spectrafact::cli::{parse_config, run, Command, ResultJson, RunConfig, EXIT_CONFIG, EXIT_NOT_PSD, EXIT_OK};
use spectrafact::model::ModelJson;
use spectrafact::solver::Orders;

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("spectrafact")
        .chain(args.iter().copied())
        .map(String::from)
        .collect()
}

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_spectrafact"))
}

fn small_pipeline(dir: &Path, seed: u64) -> RunConfig {
    let d = dir.to_str().unwrap();
    let s = seed.to_string();
    parse_config(argv(&[
        "pipeline",
        "--n",
        "4",
        "--r",
        "1",
        "--m",
        "1",
        "--N",
        "2000",
        "--seed",
        &s,
        "--out-dir",
        d,
    ]))
    .unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() && path.file_name().unwrap() != "timing.json" {
            out.insert(path.clone(), fs::read(&path).unwrap());
        }
    }
    out
}

#[test]
fn parses_full_scale_pipeline() {
    let cfg = parse_config(argv(&[
        "pipeline",
        "--n",
        "10",
        "--r",
        "3",
        "--m",
        "5",
        "--N",
        "6000",
        "--seed",
        "7",
        "--out-dir",
        "o",
    ]))
    .unwrap();
    assert_eq!(cfg.command, Command::Pipeline);
    assert_eq!((cfg.n, cfg.r, cfg.m, cfg.samples, cfg.seed), (10, 3, 5, 6000, 7));
    assert_eq!(cfg.orders, None);
    assert_eq!(cfg.grid_size, 512);
    assert_eq!(cfg.trials, 1);
}

#[test]
fn empty_argv_lists_commands() {
    let err = parse_config(argv(&[])).unwrap_err();
    assert_eq!(err.code, EXIT_CONFIG);
    for name in ["generate", "simulate", "estimate", "decompose", "analyze", "pipeline"] {
        assert!(err.message.contains(name), "{name} missing from {}", err.message);
    }
}

#[test]
fn orders_flag_enables_variant() {
    let cfg = parse_config(argv(&["pipeline", "--m", "2", "--orders", "1,2,2", "--out-dir", "o"])).unwrap();
    assert_eq!(cfg.orders, Some(Orders { mx: 1, my: 2, mz: 2 }));
    let err = parse_config(argv(&["pipeline", "--orders", "2,1,3", "--out-dir", "o"])).unwrap_err();
    assert!(err.message.contains("orders"));
    assert!(parse_config(argv(&["pipeline", "--orders", "1,2", "--out-dir", "o"])).is_err());
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.json");
    fs::write(
        &file,
        r#"{"command": "pipeline", "n": 6, "r": 2, "seed": 4, "solver": {"max_iter": 500}, "paths": {"out_dir": "x"}}"#,
    )
    .unwrap();
    let f = file.to_str().unwrap();
    let cfg = parse_config(argv(&["--config", f, "--seed", "9", "--tol", "1e-6"])).unwrap();
    assert_eq!((cfg.n, cfg.r, cfg.seed), (6, 2, 9));
    assert_eq!(cfg.solver.max_iter, 500);
    assert_eq!((cfg.solver.tol_primal, cfg.solver.tol_cone), (1e-6, 1e-6));
    assert_eq!(cfg.paths.out_dir, Some(PathBuf::from("x")));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.json");
    fs::write(&file, r#"{"command": "generate", "colour": 1}"#).unwrap();
    let err = parse_config(argv(&["--config", file.to_str().unwrap()])).unwrap_err();
    assert_eq!(err.code, EXIT_CONFIG);
    assert!(err.message.contains("colour"));

    let err = parse_config(argv(&["--config", "/nonexistent/run.json"])).unwrap_err();
    assert!(err.message.contains("/nonexistent/run.json"));

    let err = parse_config(argv(&["decompose", "--out", "r.json"])).unwrap_err();
    assert!(err.message.contains("`input`"));

    let err = parse_config(argv(&["generate", "--out", "a", "--model", "a"])).unwrap_err();
    assert!(err.message.contains("model") && err.message.contains("out"));

    assert!(parse_config(argv(&["generate", "--out", "a", "--frobnicate"])).is_err());
}

#[test]
fn written_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_pipeline(dir.path(), 3);
    assert_eq!(run(&cfg).code, EXIT_OK);
    let written = dir.path().join("config.json");
    let again = parse_config(argv(&["--config", written.to_str().unwrap()])).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn pipeline_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_pipeline(dir.path(), 5);
    let first = run(&cfg);
    assert_eq!(first.code, EXIT_OK, "{:?}", first.message);
    let before = snapshot(dir.path());
    for name in [
        "model.json",
        "samples.csv",
        "spectrum.json",
        "result.json",
        "error_psi_x.csv",
        "error_psi_y.csv",
        "singular_profile.csv",
        "summary.json",
    ] {
        assert!(before.contains_key(&dir.path().join(name)), "{name} not written");
    }
    assert!(dir.path().join("timing.json").exists());
    let second = run(&cfg);
    assert_eq!(second.summary, first.summary);
    assert_eq!(snapshot(dir.path()), before);
}

#[test]
fn decompose_needs_only_the_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&small_pipeline(dir.path(), 6)).code, EXIT_OK);
    fs::remove_file(dir.path().join("samples.csv")).unwrap();
    fs::remove_file(dir.path().join("model.json")).unwrap();
    let spectrum = dir.path().join("spectrum.json");
    let out = dir.path().join("again.json");
    let cfg = parse_config(argv(&[
        "decompose",
        "--input",
        spectrum.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]))
    .unwrap();
    assert_eq!(run(&cfg).code, EXIT_OK);
    assert_eq!(
        fs::read(out).unwrap(),
        fs::read(dir.path().join("result.json")).unwrap()
    );
}

#[test]
fn diagonal_model_has_no_common_part() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let model = ModelJson {
        n: 3,
        r: 1,
        m: 1,
        a: vec![vec![0.0; 3]; 2],
        b_diag: vec![vec![1.0, 0.8, 1.2], vec![0.5, -0.3, 0.2]],
    };
    fs::write(p("model.json"), serde_json::to_string(&model).unwrap()).unwrap();
    let stages: [&[&str]; 4] = [
        &[
            "simulate",
            "--model",
            &p("model.json"),
            "--N",
            "50000",
            "--seed",
            "2",
            "--out",
            &p("x.csv"),
        ],
        &["estimate", "--input", &p("x.csv"), "--m", "1", "--out", &p("s.json")],
        &["decompose", "--input", &p("s.json"), "--out", &p("r.json")],
        &[
            "analyze",
            "--input",
            &p("r.json"),
            "--model",
            &p("model.json"),
            "--spectrum",
            &p("s.json"),
            "--out-dir",
            &p("an"),
        ],
    ];
    for args in stages {
        let report = run(&parse_config(argv(args)).unwrap());
        assert_eq!(report.code, EXIT_OK, "{args:?}: {:?}", report.message);
    }
    let result: ResultJson = serde_json::from_str(&fs::read_to_string(p("r.json")).unwrap()).unwrap();
    let spectrum: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("s.json")).unwrap()).unwrap();
    let r0 = &spectrum["coeffs"][0];
    let trace: f64 = (0..3).map(|i| r0[4 * i].as_f64().unwrap()).sum();
    assert!(
        result.objective <= 0.02 * trace,
        "objective {} vs trace {trace}",
        result.objective
    );
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("an/analysis.json")).unwrap()).unwrap();
    assert_eq!(summary["r_hat"], 0);
    assert!(summary["common_share"].as_f64().unwrap() < 0.05);
    // No common part in the truth, so there is no Ψ_y error to report.
    assert!(!dir.path().join("an/error_psi_y.csv").exists());
    assert!(summary.get("m_e_psi_y").is_none());
    assert!(summary["m_e_psi_x"].as_f64().unwrap() < 0.1);
}

#[test]
fn not_psd_spectrum_exits_without_result() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.json");
    let out = dir.path().join("result.json");
    fs::write(&input, r#"{"n": 1, "m": 1, "coeffs": [[0.0], [1.0]]}"#).unwrap();
    let status = bin()
        .args([
            "decompose",
            "--input",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_NOT_PSD));
    assert!(String::from_utf8_lossy(&status.stderr).contains("decompose"));
    assert!(!out.exists());
}

#[test]
fn binary_usage_and_data_errors() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.csv");
    fs::write(&junk, "1,2\n3\n").unwrap();
    let out = bin()
        .args([
            "estimate",
            "--input",
            junk.to_str().unwrap(),
            "--out",
            dir.path().join("s.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn max_iter_is_a_distinct_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = bin()
        .args([
            "pipeline",
            "--n",
            "4",
            "--r",
            "1",
            "--m",
            "1",
            "--N",
            "2000",
            "--max-iter",
            "20",
            "--out-dir",
            d,
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
    assert!(dir.path().join("result.json").exists());
}

#[test]
fn trials_merge_by_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("multi");
    let out = bin()
        .env("SPECTRAFACT_THREADS", "2")
        .args([
            "pipeline", "--n", "4", "--r", "1", "--m", "1", "--N", "2000", "--seed", "10", "--trials", "3",
        ])
        .args(["--out-dir", d.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let merged: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("summary.json")).unwrap()).unwrap();
    let trials = merged["trials"].as_array().unwrap();
    let seeds: Vec<u64> = trials.iter().map(|t| t["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![10, 11, 12]);

    let single = dir.path().join("single");
    let report = run(&small_pipeline(&single, 11));
    assert_eq!(report.summary.as_ref(), Some(&trials[1]));
    assert_eq!(
        fs::read(single.join("result.json")).unwrap(),
        fs::read(d.join("seed_11/result.json")).unwrap()
    );
}
