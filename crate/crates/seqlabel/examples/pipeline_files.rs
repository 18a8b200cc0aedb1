//! Walks the whole file-based workflow: a truth spec on disk becomes votes
//! and gold CSVs, the votes alone become a fitted parameter file, and the
//! parameters become probabilistic labels that are scored against the gold.
//! Every artifact survives in a temp directory for inspection; the same flow
//! is available through the `seqlabel` binary's subcommands.
//!
//! Run with `cargo run --release --example pipeline_files`.

use std::fs::File;
use std::io::Write;

use seqlabel::estimator::{fit_closed_form, FitOptions, LabelModelParams};
use seqlabel::inference::{
    emit_labels, evaluate, read_gold_csv, read_labels_csv, write_labels_csv, InferenceEngine,
};
use seqlabel::model::{LabelModel, VoteTensor};
use seqlabel::moments::VotesOracle;
use seqlabel::synth::{generate, scene_fixture, GeneratorSpec};
use seqlabel::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("seqlabel_pipeline_demo");
    std::fs::create_dir_all(&dir)?;

    let truth_path = dir.join("truth.json");
    scene_fixture()?.save(&truth_path, 20_000, 99)?;
    println!("truth spec        {}", truth_path.display());

    let loaded = GeneratorSpec::load(&truth_path)?;
    let model_path = dir.join("model.json");
    loaded.spec.model().save(&model_path)?;
    println!("model config      {}", model_path.display());

    let (votes, latent) = generate(&loaded.spec, loaded.n, loaded.seed)?;
    let votes_path = dir.join("votes.csv");
    votes.write_csv(File::create(&votes_path)?, loaded.spec.model().sources())?;
    println!("votes             {}", votes_path.display());

    let gold_path = dir.join("gold.csv");
    let layout = loaded.spec.model().layout();
    let mut gold_file = File::create(&gold_path)?;
    writeln!(gold_file, "seq_id,task_index,label")?;
    for (seq, &config) in latent.iter().enumerate() {
        for task in 0..layout.n_tasks() {
            let label = layout.derived_label(task, config);
            writeln!(gold_file, "{},{},{label}", votes.seq_ids()[seq], task + 1)?;
        }
    }
    println!("gold labels       {}", gold_path.display());

    let (model, warnings) = LabelModel::load(&model_path)?;
    assert!(warnings.is_empty());
    let votes_back = VoteTensor::read_csv(File::open(&votes_path)?, model.sources())?;
    let oracle = VotesOracle::new(&votes_back);
    let params = fit_closed_form(&model, &oracle, &FitOptions::default())?;
    let params_path = dir.join("params.json");
    params.save(&params_path)?;
    println!("fitted parameters {}", params_path.display());

    let params_back = LabelModelParams::load(&params_path)?;
    let engine = InferenceEngine::new(&model, &params_back)?;
    let (rows, _) = emit_labels(&engine, &votes_back, 1)?;
    let labels_path = dir.join("labels.csv");
    write_labels_csv(&rows, File::create(&labels_path)?)?;
    println!("labels            {}", labels_path.display());

    let predictions = read_labels_csv(File::open(&labels_path)?)?;
    let gold = read_gold_csv(File::open(&gold_path)?)?;
    let metrics = evaluate(&predictions, &gold, 0.5)?;
    let metrics_path = dir.join("metrics.json");
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&metrics)
            .map_err(|e| seqlabel::Error::Parse(e.to_string()))?,
    )?;
    println!("metrics           {}", metrics_path.display());

    println!(
        "\nelement-level results on {} scored labels: precision {:.4}, recall {:.4}, F1 {:.4}",
        metrics.n_eval,
        metrics.precision.unwrap_or(f64::NAN),
        metrics.recall.unwrap_or(f64::NAN),
        metrics.f1.unwrap_or(f64::NAN)
    );
    Ok(())
}
