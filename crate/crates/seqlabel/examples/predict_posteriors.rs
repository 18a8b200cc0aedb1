//! Turns raw votes into probabilistic labels: fits the model, then reads a
//! handful of sequences back out at every resolution the task layout offers,
//! with a plain majority vote alongside for contrast.
//!
//! Run with `cargo run --release --example predict_posteriors`.

use seqlabel::estimator::{fit_closed_form, FitOptions};
use seqlabel::inference::{emit_labels, majority_vote, InferenceEngine};
use seqlabel::moments::VotesOracle;
use seqlabel::synth::{generate, scene_fixture};
use seqlabel::Result;

fn main() -> Result<()> {
    let spec = scene_fixture()?;
    let model = spec.model();
    let layout = model.layout();
    let (votes, latent) = generate(&spec, 50_000, 21)?;

    let oracle = VotesOracle::new(&votes);
    let params = fit_closed_form(model, &oracle, &FitOptions::default())?;
    let engine = InferenceEngine::new(model, &params)?;

    println!("posterior marginals for the first three sequences:\n");
    for seq in 0..3 {
        let (posterior, warning) = engine.posterior(&votes, seq);
        if warning.is_some() {
            println!("sequence {seq}: posterior collapsed, skipping");
            continue;
        }
        let config = latent[seq];
        println!("sequence {seq} (true element labels, + = positive):");
        for resolution in 1..=layout.n_resolutions() {
            let mut line = format!("  resolution {resolution}:");
            for &task in layout.tasks_at(resolution) {
                let p = posterior.task_marginal(layout, task);
                let truth = layout.derived_label(task, config);
                let mark = if truth == 1 { '+' } else { '-' };
                let span = layout.task(task);
                line.push_str(&format!(" [{}..{}]={p:.3}({mark})", span.lo, span.hi));
            }
            println!("{line}");
        }
        println!();
    }

    let threshold = 0.5;
    for resolution in 1..=layout.n_resolutions() {
        let tasks = layout.tasks_at(resolution);
        let (rows, _) = emit_labels(&engine, &votes, resolution)?;
        let mv = majority_vote(&votes, model, resolution)?;
        let mut model_hits = 0u64;
        let mut mv_hits = 0u64;
        let mut mv_total = 0u64;
        for row in &rows {
            let truth = layout.derived_label(row.task, latent[row.seq_id as usize]);
            let call = if row.p_positive >= threshold { 1 } else { -1 };
            if call == truth {
                model_hits += 1;
            }
            let col = tasks.iter().position(|&t| t == row.task).unwrap();
            let mv_call = mv[row.seq_id as usize][col];
            if mv_call != 0 {
                mv_total += 1;
                if mv_call == truth {
                    mv_hits += 1;
                }
            }
        }
        println!(
            "resolution {resolution}: model accuracy {:.4} over {} labels; \
             majority vote {:.4} over its {} non-abstentions",
            model_hits as f64 / rows.len() as f64,
            rows.len(),
            mv_hits as f64 / mv_total.max(1) as f64,
            mv_total
        );
    }
    Ok(())
}
