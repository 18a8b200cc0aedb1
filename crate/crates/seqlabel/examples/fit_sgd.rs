//! Fits the same model twice — once in closed form, once by projected
//! gradient descent on the moment-matching loss — and shows that the two
//! estimators land on the same parameters.
//!
//! Run with `cargo run --release --example fit_sgd`.

use seqlabel::estimator::{fit_closed_form, FitOptions};
use seqlabel::moments::VotesOracle;
use seqlabel::sgd::{build_constraints, fit_sgd, SgdOptions};
use seqlabel::synth::{generate, scene_fixture};
use seqlabel::Result;

fn main() -> Result<()> {
    let spec = scene_fixture()?;
    let (votes, _) = generate(&spec, 200_000, 7)?;
    let oracle = VotesOracle::new(&votes);

    let constraints = build_constraints(spec.model(), &oracle, false)?;
    let (n_means, n_pairs, n_edges, n_composites) = constraints.counts();
    println!(
        "constraint set: {n_means} vote-mean, {n_pairs} pair-product, {n_edges} edge, \
         {n_composites} composite constraints"
    );

    let opts = SgdOptions::default();
    println!(
        "descending: lr = {}, epochs = {}, full-batch, projection on\n",
        opts.lr, opts.epochs
    );
    let (by_sgd, curve) = fit_sgd(&constraints, None, &opts)?;

    println!("loss trajectory:");
    for epoch in [0usize, 10, 100, 500, 1000, curve.len() - 1] {
        println!("  epoch {:>5}: {:.3e}", epoch, curve[epoch.min(curve.len() - 1)]);
    }

    let closed = fit_closed_form(spec.model(), &oracle, &FitOptions::default())?;
    let gap = by_sgd
        .stacked_mu()
        .iter()
        .zip(closed.stacked_mu())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("\nlargest accuracy-table disagreement with the closed form: {gap:.5}");

    let truth = spec.true_params();
    for (name, params) in [("closed form", &closed), ("sgd", &by_sgd)] {
        let err = params
            .stacked_mu()
            .iter()
            .zip(truth.stacked_mu())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        println!("{name:<12} worst error vs generator truth: {err:.5}");
    }
    Ok(())
}
