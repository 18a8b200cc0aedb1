//! Measures how parameter recovery error shrinks as the vote sample grows,
//! with and without tying sources that share an accuracy profile. Tied
//! estimation pools agreement statistics across group members, so its curve
//! sits below the untied one while both fall at roughly the noise-averaging
//! rate of n^(-1/2).
//!
//! Run with `cargo run --release --example scaling_study`.

use seqlabel::synth::{log_log_slope, scaling_experiment, scaling_fixture};
use seqlabel::Result;

fn main() -> Result<()> {
    let spec = scaling_fixture()?;
    let n_grid = [1000, 2000, 4000, 8000, 16000];
    let seeds: Vec<u64> = (0..8).collect();
    println!(
        "fitting {} sources at n = {n_grid:?}, {} seeds each, tied and untied",
        spec.model().sources().len(),
        seeds.len()
    );

    let rows = scaling_experiment(&spec, &n_grid, &seeds)?;

    println!("\n      n    tied error    untied error");
    for &n in &n_grid {
        let mean = |tying: bool| {
            let errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.n == n && r.tying == tying && r.error.is_finite())
                .map(|r| r.error)
                .collect();
            errs.iter().sum::<f64>() / errs.len() as f64
        };
        println!("  {n:>5}      {:.4}          {:.4}", mean(true), mean(false));
    }

    println!(
        "\nlog-log slope: tied {:.3}, untied {:.3} (n^(-1/2) sampling noise gives -0.5)",
        log_log_slope(&rows, true),
        log_log_slope(&rows, false)
    );
    Ok(())
}
