//! Drives the compiled binary end to end: artifact formats, exit codes,
//! the machine-readable error channel, and cross-thread determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seqlabel::estimator::{fit_closed_form, FitOptions};
use seqlabel::inference::{emit_labels, write_labels_csv, InferenceEngine};
use seqlabel::model::{AggregationRule, LabelModel, Prior, SourceSpec, TaskLayout, VoteTensor};
use seqlabel::moments::VotesOracle;
use seqlabel::synth::{benefit_fixture, generate, scene_fixture};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqlabel"))
}

fn run(args: &[&str]) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    cmd.output().expect("binary should spawn")
}

fn stderr_line(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).trim().to_string()
}

/// A structurally unestimable model: two sources can never supply the two
/// independent partners each accuracy needs.
fn starved_model(dir: &Path) -> PathBuf {
    let layout = TaskLayout::new(2, AggregationRule::AnyPositive, &[]).unwrap();
    let sources = vec![
        SourceSpec::new(0, 1, vec![0, 1], "a", &layout).unwrap(),
        SourceSpec::new(1, 1, vec![0, 1], "b", &layout).unwrap(),
    ];
    let model = LabelModel::new(layout, sources, &[], Prior::uniform(2)).unwrap();
    let path = dir.join("starved.json");
    model.save(&path).unwrap();
    path
}

#[test]
fn check_passes_sound_models_and_rejects_starved_ones() {
    let dir = tempfile::tempdir().unwrap();
    let spec = scene_fixture().unwrap();
    let model_path = dir.path().join("model.json");
    spec.model().save(&model_path).unwrap();

    let report_path = dir.path().join("report.json");
    let ok = run(&[
        "check",
        "--model",
        model_path.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert!(ok.status.success(), "stderr: {}", stderr_line(&ok));
    let stdout: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(stdout["ok"], serde_json::Value::Bool(true));
    let file: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(file["ok"], serde_json::Value::Bool(true));

    let bad = run(&["check", "--model", starved_model(dir.path()).to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(
        stderr_line(&bad).starts_with("E_VALIDATE:"),
        "stderr was: {}",
        stderr_line(&bad)
    );
    let report: serde_json::Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(report["ok"], serde_json::Value::Bool(false));
    assert!(!report["findings"].as_array().unwrap().is_empty());
}

#[test]
fn errors_arrive_on_stderr_with_their_code_and_path() {
    let dir = tempfile::tempdir().unwrap();
    let mangled = dir.path().join("mangled.json");
    std::fs::write(&mangled, "{\"layout\": ").unwrap();
    let parse = run(&["check", "--model", mangled.to_str().unwrap()]);
    assert_eq!(parse.status.code(), Some(1));
    let line = stderr_line(&parse);
    assert!(line.starts_with("E_PARSE:"), "stderr was: {line}");
    assert!(line.contains("mangled.json"), "stderr was: {line}");

    let spec = scene_fixture().unwrap();
    let model_path = dir.path().join("model.json");
    spec.model().save(&model_path).unwrap();
    let missing = dir.path().join("absent").join("votes.csv");
    let data = run(&[
        "fit",
        "--model",
        model_path.to_str().unwrap(),
        "--votes",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("params.json").to_str().unwrap(),
    ]);
    assert_eq!(data.status.code(), Some(1));
    let line = stderr_line(&data);
    assert!(line.starts_with("E_DATA:"), "stderr was: {line}");
    assert!(line.contains("votes.csv"), "stderr was: {line}");
}

#[test]
fn check_agrees_with_fit_on_model_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let spec = scene_fixture().unwrap();
    let sound = dir.path().join("sound.json");
    spec.model().save(&sound).unwrap();
    let (votes, _) = generate(&spec, 3000, 5).unwrap();
    let votes_path = dir.path().join("votes.csv");
    votes
        .write_csv(std::fs::File::create(&votes_path).unwrap(), spec.model().sources())
        .unwrap();

    let starved = starved_model(dir.path());
    let starved_votes = {
        let (model, _) = LabelModel::load(&starved).unwrap();
        let mut tensor = VoteTensor::new(50, model.sources());
        for seq in 0..50 {
            for j in 0..2 {
                for slot in 0..2 {
                    tensor.set(seq, j, slot, if seq % 2 == 0 { 1 } else { -1 }).unwrap();
                }
            }
        }
        let path = dir.path().join("starved_votes.csv");
        tensor.write_csv(std::fs::File::create(&path).unwrap(), model.sources()).unwrap();
        path
    };

    for (model_path, votes_path) in [(&sound, &votes_path), (&starved, &starved_votes)] {
        let checked = run(&["check", "--model", model_path.to_str().unwrap()]);
        let fitted = run(&[
            "fit",
            "--model",
            model_path.to_str().unwrap(),
            "--votes",
            votes_path.to_str().unwrap(),
            "--out",
            dir.path().join("out_params.json").to_str().unwrap(),
        ]);
        assert_eq!(
            checked.status.success(),
            fitted.status.success(),
            "check and fit disagree on {}: check {:?} vs fit {:?} ({})",
            model_path.display(),
            checked.status.code(),
            fitted.status.code(),
            stderr_line(&fitted)
        );
        if !fitted.status.success() {
            assert!(stderr_line(&fitted).starts_with("E_VALIDATE:"));
        }
    }
}

#[test]
fn simulate_fit_predict_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = benefit_fixture().unwrap();
    let truth_path = dir.path().join("truth.json");
    spec.save(&truth_path, 2000, 7).unwrap();
    let sim_dir = dir.path().join("artifacts");

    let sim = run(&[
        "simulate",
        "--model",
        truth_path.to_str().unwrap(),
        "--out",
        sim_dir.to_str().unwrap(),
    ]);
    assert!(sim.status.success(), "stderr: {}", stderr_line(&sim));
    for file in ["votes.csv", "gold.csv", "scaling.csv", "benefit.csv"] {
        assert!(sim_dir.join(file).exists(), "simulate did not write {file}");
    }
    let scaling = std::fs::read_to_string(sim_dir.join("scaling.csv")).unwrap();
    assert!(scaling.lines().next().unwrap() == "n,seed,tying,error");
    let benefit = std::fs::read_to_string(sim_dir.join("benefit.csv")).unwrap();
    assert!(benefit.lines().next().unwrap() == "seed,method,f1");

    let model_path = dir.path().join("model.json");
    spec.model().save(&model_path).unwrap();
    let params_path = dir.path().join("params.json");
    let fit = run(&[
        "fit",
        "--model",
        model_path.to_str().unwrap(),
        "--votes",
        sim_dir.join("votes.csv").to_str().unwrap(),
        "--out",
        params_path.to_str().unwrap(),
    ]);
    assert!(fit.status.success(), "stderr: {}", stderr_line(&fit));

    let labels_path = dir.path().join("labels.csv");
    let predict = run(&[
        "predict",
        "--model",
        model_path.to_str().unwrap(),
        "--votes",
        sim_dir.join("votes.csv").to_str().unwrap(),
        "--params",
        params_path.to_str().unwrap(),
        "--out",
        labels_path.to_str().unwrap(),
    ]);
    assert!(predict.status.success(), "stderr: {}", stderr_line(&predict));

    let eval = run(&[
        "eval",
        "--model",
        model_path.to_str().unwrap(),
        "--votes",
        sim_dir.join("votes.csv").to_str().unwrap(),
        "--params",
        params_path.to_str().unwrap(),
        "--gold",
        sim_dir.join("gold.csv").to_str().unwrap(),
    ]);
    assert!(eval.status.success(), "stderr: {}", stderr_line(&eval));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    let model_f1 = report["model"]["f1"].as_f64().unwrap();
    let mv_f1 = report["majority_vote"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&model_f1));
    assert!((0.0..=1.0).contains(&mv_f1));
    assert!(
        model_f1 > 0.5,
        "posterior labels should beat chance on their own generator, got {model_f1}"
    );
}

#[test]
fn cli_predictions_match_the_library_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let spec = scene_fixture().unwrap();
    let model_path = dir.path().join("model.json");
    spec.model().save(&model_path).unwrap();
    let (votes, _) = generate(&spec, 4000, 13).unwrap();
    let votes_path = dir.path().join("votes.csv");
    votes
        .write_csv(std::fs::File::create(&votes_path).unwrap(), spec.model().sources())
        .unwrap();

    let params_path = dir.path().join("params.json");
    let fit = run(&[
        "fit",
        "--model",
        model_path.to_str().unwrap(),
        "--votes",
        votes_path.to_str().unwrap(),
        "--out",
        params_path.to_str().unwrap(),
    ]);
    assert!(fit.status.success(), "stderr: {}", stderr_line(&fit));

    let mut cli_bytes = Vec::new();
    for threads in ["1", "4"] {
        let labels_path = dir.path().join(format!("labels_t{threads}.csv"));
        let predict = run(&[
            "predict",
            "--model",
            model_path.to_str().unwrap(),
            "--votes",
            votes_path.to_str().unwrap(),
            "--params",
            params_path.to_str().unwrap(),
            "--out",
            labels_path.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(predict.status.success(), "stderr: {}", stderr_line(&predict));
        cli_bytes.push(std::fs::read(&labels_path).unwrap());
    }
    assert_eq!(cli_bytes[0], cli_bytes[1], "predict differs across --threads");

    let (model, _) = LabelModel::load(&model_path).unwrap();
    let oracle = VotesOracle::new(&votes);
    let params = fit_closed_form(&model, &oracle, &FitOptions::default()).unwrap();
    let engine = InferenceEngine::new(&model, &params).unwrap();
    let (rows, _) = emit_labels(&engine, &votes, 1).unwrap();
    let mut lib_bytes = Vec::new();
    write_labels_csv(&rows, &mut lib_bytes).unwrap();
    assert_eq!(
        cli_bytes[0], lib_bytes,
        "file-mediated pipeline diverges from the in-memory one"
    );
}

#[test]
fn sgd_fit_writes_parameters_and_a_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let spec = scene_fixture().unwrap();
    let model_path = dir.path().join("model.json");
    spec.model().save(&model_path).unwrap();
    let (votes, _) = generate(&spec, 3000, 2).unwrap();
    let votes_path = dir.path().join("votes.csv");
    votes
        .write_csv(std::fs::File::create(&votes_path).unwrap(), spec.model().sources())
        .unwrap();

    let params_path = dir.path().join("params_sgd.json");
    let fit = run(&[
        "fit",
        "--model",
        model_path.to_str().unwrap(),
        "--votes",
        votes_path.to_str().unwrap(),
        "--out",
        params_path.to_str().unwrap(),
        "--method",
        "sgd",
        "--epochs",
        "300",
    ]);
    assert!(fit.status.success(), "stderr: {}", stderr_line(&fit));
    let params = seqlabel::estimator::LabelModelParams::load(&params_path).unwrap();
    assert_eq!(params.diagnostics.method, "sgd");

    let curve_path = dir.path().join("params_sgd.json.loss.csv");
    let curve = std::fs::read_to_string(&curve_path).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next().unwrap(), "epoch,loss");
    let losses: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(losses.len() >= 300);
    assert!(
        losses.last().unwrap() < &losses[0],
        "loss should decrease from {} but ended at {}",
        losses[0],
        losses.last().unwrap()
    );
}

#[test]
fn predict_emits_coarse_resolutions_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let spec = scene_fixture().unwrap();
    let model_path = dir.path().join("model.json");
    spec.model().save(&model_path).unwrap();
    let (votes, _) = generate(&spec, 1000, 21).unwrap();
    let votes_path = dir.path().join("votes.csv");
    votes
        .write_csv(std::fs::File::create(&votes_path).unwrap(), spec.model().sources())
        .unwrap();
    let params_path = dir.path().join("params.json");
    let fit = run(&[
        "fit",
        "--model",
        model_path.to_str().unwrap(),
        "--votes",
        votes_path.to_str().unwrap(),
        "--out",
        params_path.to_str().unwrap(),
    ]);
    assert!(fit.status.success(), "stderr: {}", stderr_line(&fit));

    for (resolution, tasks_per_seq) in [("1", 4usize), ("2", 3), ("3", 1)] {
        let labels_path = dir.path().join(format!("labels_r{resolution}.csv"));
        let predict = run(&[
            "predict",
            "--model",
            model_path.to_str().unwrap(),
            "--votes",
            votes_path.to_str().unwrap(),
            "--params",
            params_path.to_str().unwrap(),
            "--out",
            labels_path.to_str().unwrap(),
            "--resolution",
            resolution,
        ]);
        assert!(predict.status.success(), "stderr: {}", stderr_line(&predict));
        let rows = seqlabel::inference::read_labels_csv(
            std::fs::File::open(&labels_path).unwrap(),
        )
        .unwrap();
        assert_eq!(rows.len(), 1000 * tasks_per_seq, "resolution {resolution}");
    }

    let over = run(&[
        "predict",
        "--model",
        model_path.to_str().unwrap(),
        "--votes",
        votes_path.to_str().unwrap(),
        "--params",
        params_path.to_str().unwrap(),
        "--out",
        dir.path().join("labels_r9.csv").to_str().unwrap(),
        "--resolution",
        "9",
    ]);
    assert_eq!(over.status.code(), Some(1));
    assert!(stderr_line(&over).starts_with("E_"), "stderr: {}", stderr_line(&over));
}
