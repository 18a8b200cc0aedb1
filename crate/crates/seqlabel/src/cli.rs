//! The `check`/`fit`/`predict`/`eval`/`simulate` driver behind the thin
//! binary. Every artifact this module writes is deterministic given the
//! input files, the seed, and the flags — thread count included — so runs
//! can be diffed byte for byte.
//!
//! Errors leave through a single channel: the process exits 1 after printing
//! one machine-readable line (`E_PARSE`, `E_VALIDATE`, `E_DATA`,
//! `E_NUMERIC`) plus human detail on stderr. Verbosity is controlled by the
//! `SEQLABEL_LOG` environment variable (`error`, `warn`, `info`, `debug`).

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result, Warning};
use crate::estimator::{fit_closed_form, FitOptions, LabelModelParams};
use crate::inference::{
    emit_labels, evaluate, majority_vote, read_gold_csv, write_labels_csv, InferenceEngine,
    LabelRow, Metrics,
};
use crate::model::{validate_model, LabelModel, VoteTensor};
use crate::moments::VotesOracle;
use crate::sgd::{build_constraints, fit_sgd, SgdOptions};
use crate::synth::{
    scaling_experiment, sequential_benefit_experiment, write_benefit_csv, write_scaling_csv,
    GeneratorSpec,
};

#[derive(Debug, Parser)]
#[command(
    name = "seqlabel",
    version,
    about = "Estimate weak-supervision source accuracies and emit training labels"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads; 0 uses every available core. Results are identical
    /// at any setting.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    ClosedForm,
    Sgd,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a model file's structural assumptions and print the report.
    Check {
        /// Model configuration (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate accuracy and correlation tables from votes.
    Fit {
        /// Model configuration (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Votes (CSV: seq_id,source_id,task_index,vote).
        #[arg(long)]
        votes: PathBuf,
        /// Output parameters file (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::ClosedForm)]
        method: Method,
        /// Disable tie-group pooling (closed form only).
        #[arg(long)]
        no_tying: bool,
        /// Gradient-descent learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Gradient-descent epoch budget.
        #[arg(long)]
        epochs: Option<usize>,
        /// Minibatch size; 0 is full batch.
        #[arg(long)]
        batch: Option<usize>,
        /// Seed for minibatch shuffling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute posterior label probabilities for every sequence.
    Predict {
        /// Model configuration (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Votes (CSV).
        #[arg(long)]
        votes: PathBuf,
        /// Fitted parameters (JSON).
        #[arg(long)]
        params: PathBuf,
        /// Output labels file (CSV: seq_id,task_index,p_positive).
        #[arg(long)]
        out: PathBuf,
        /// Task resolution to emit (1 = element tasks).
        #[arg(long, default_value_t = 1)]
        resolution: usize,
    },
    /// Score posterior labels and the majority-vote baseline against gold.
    Eval {
        /// Model configuration (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Votes (CSV).
        #[arg(long)]
        votes: PathBuf,
        /// Fitted parameters (JSON).
        #[arg(long)]
        params: PathBuf,
        /// Gold labels (CSV: seq_id,task_index,label).
        #[arg(long)]
        gold: PathBuf,
        /// Also write the metrics here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Task resolution to score (1 = element tasks).
        #[arg(long, default_value_t = 1)]
        resolution: usize,
        /// Decision threshold on p_positive.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Sample a dataset from a generator description and run the scaling
    /// and correlation-benefit experiments on it.
    Simulate {
        /// Generator description: model JSON plus a "truth" section.
        #[arg(long)]
        model: PathBuf,
        /// Output directory for votes.csv, gold.csv, scaling.csv, benefit.csv.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed declared in the file.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Paired scores: the fitted model's labels and the unweighted-vote
/// baseline, each in the standard metrics shape.
#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub model: Metrics,
    pub majority_vote: Metrics,
}

/// Parses arguments, configures logging and the thread pool, runs the
/// requested command, and maps failures onto the exit convention.
pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("SEQLABEL_LOG", "warn"),
    )
    .format_timestamp(None)
    .try_init()
    .ok();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            log::warn!("thread pool already configured: {e}");
        }
    }
    match run(cli.command, cli.threads) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}: {e}", e.code().as_str());
            1
        }
    }
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => io_err(path, io),
        other => other,
    }
}

fn load_model(path: &Path) -> Result<LabelModel> {
    let (model, warnings) = LabelModel::load(path).map_err(|e| with_path(path, e))?;
    log_warnings(&warnings);
    Ok(model)
}

fn load_params(path: &Path) -> Result<LabelModelParams> {
    LabelModelParams::load(path).map_err(|e| with_path(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

fn load_votes(path: &Path, model: &LabelModel) -> Result<VoteTensor> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    VoteTensor::read_csv(file, model.sources())
}

fn log_warnings(warnings: &[Warning]) {
    for w in warnings {
        log::warn!("{w}");
    }
}

fn run(command: Command, threads: usize) -> Result<i32> {
    match command {
        Command::Check { model, out } => {
            log::info!(
                "check: model = {}, threads = {threads}",
                model.display()
            );
            let loaded = load_model(&model)?;
            let report = validate_model(&loaded);
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Parse(format!("could not serialize report: {e}")))?;
            println!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, text)?;
            }
            if report.ok {
                Ok(0)
            } else {
                eprintln!(
                    "E_VALIDATE: model fails {} structural check(s)",
                    report.findings.len()
                );
                Ok(1)
            }
        }
        Command::Fit {
            model,
            votes,
            out,
            method,
            no_tying,
            lr,
            epochs,
            batch,
            seed,
        } => {
            log::info!(
                "fit: model = {}, votes = {}, method = {method:?}, tying = {}, seed = {seed}, threads = {threads}",
                model.display(),
                votes.display(),
                !no_tying
            );
            let loaded = load_model(&model)?;
            let tensor = load_votes(&votes, &loaded)?;
            let oracle = VotesOracle::new(&tensor);
            let params = match method {
                Method::ClosedForm => {
                    fit_closed_form(&loaded, &oracle, &FitOptions { tying: !no_tying })?
                }
                Method::Sgd => {
                    let defaults = SgdOptions::default();
                    let opts = SgdOptions {
                        lr: lr.unwrap_or(defaults.lr),
                        epochs: epochs.unwrap_or(defaults.epochs),
                        batch: batch.unwrap_or(defaults.batch),
                        seed,
                        projection: true,
                    };
                    log::info!(
                        "sgd: lr = {}, epochs = {}, batch = {}",
                        opts.lr,
                        opts.epochs,
                        opts.batch
                    );
                    let constraints = build_constraints(&loaded, &oracle, false)?;
                    let (params, curve) = fit_sgd(&constraints, None, &opts)?;
                    write_loss_curve(&out, &curve)?;
                    params
                }
            };
            log_warnings(&params.diagnostics.warnings);
            params.save(&out)?;
            log::info!("fit: wrote {}", out.display());
            Ok(0)
        }
        Command::Predict {
            model,
            votes,
            params,
            out,
            resolution,
        } => {
            log::info!(
                "predict: model = {}, votes = {}, params = {}, resolution = {resolution}, threads = {threads}",
                model.display(),
                votes.display(),
                params.display()
            );
            let loaded = load_model(&model)?;
            let tensor = load_votes(&votes, &loaded)?;
            let fitted = load_params(&params)?;
            let engine = InferenceEngine::new(&loaded, &fitted)?;
            let (rows, warnings) = emit_labels(&engine, &tensor, resolution)?;
            log_warnings(&warnings);
            let file = File::create(&out).map_err(|e| io_err(&out, e))?;
            write_labels_csv(&rows, file)?;
            log::info!("predict: wrote {} rows to {}", rows.len(), out.display());
            Ok(0)
        }
        Command::Eval {
            model,
            votes,
            params,
            gold,
            out,
            resolution,
            threshold,
        } => {
            log::info!(
                "eval: model = {}, votes = {}, params = {}, gold = {}, resolution = {resolution}, threshold = {threshold}",
                model.display(),
                votes.display(),
                params.display(),
                gold.display()
            );
            let loaded = load_model(&model)?;
            let tensor = load_votes(&votes, &loaded)?;
            let fitted = load_params(&params)?;
            let gold_file = File::open(&gold).map_err(|e| io_err(&gold, e))?;
            let gold_rows = read_gold_csv(gold_file)?;

            let engine = InferenceEngine::new(&loaded, &fitted)?;
            let (rows, warnings) = emit_labels(&engine, &tensor, resolution)?;
            log_warnings(&warnings);
            let model_metrics = evaluate(&rows, &gold_rows, threshold)?;

            let mv = majority_vote(&tensor, &loaded, resolution)?;
            let tasks = loaded.layout().tasks_at(resolution);
            let mut mv_rows = Vec::with_capacity(mv.len() * tasks.len());
            for (seq, labels) in mv.iter().enumerate() {
                for (pos, &task) in tasks.iter().enumerate() {
                    mv_rows.push(LabelRow {
                        seq_id: tensor.seq_ids()[seq],
                        task,
                        p_positive: if labels[pos] == 1 { 1.0 } else { 0.0 },
                    });
                }
            }
            let mv_metrics = evaluate(&mv_rows, &gold_rows, threshold)?;

            let report = EvalReport {
                model: model_metrics,
                majority_vote: mv_metrics,
            };
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Parse(format!("could not serialize metrics: {e}")))?;
            println!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, text)?;
            }
            Ok(0)
        }
        Command::Simulate { model, out, seed } => {
            let loaded = GeneratorSpec::load(&model).map_err(|e| with_path(&model, e))?;
            log_warnings(&loaded.warnings);
            let seed = seed.unwrap_or(loaded.seed);
            let n = loaded.n;
            log::info!(
                "simulate: spec = {}, n = {n}, seed = {seed}, out = {}, threads = {threads}",
                model.display(),
                out.display()
            );
            std::fs::create_dir_all(&out)?;
            let spec = &loaded.spec;

            let (votes, latent) = crate::synth::generate(spec, n, seed)?;
            let votes_path = out.join("votes.csv");
            let file = File::create(&votes_path).map_err(|e| io_err(&votes_path, e))?;
            votes.write_csv(file, spec.model().sources())?;
            write_gold_csv(&out.join("gold.csv"), spec.model(), &votes, &latent)?;

            let grid: Vec<usize> = [n / 8, n / 4, n / 2, n]
                .into_iter()
                .filter(|&g| g >= 64)
                .collect();
            let seeds: Vec<u64> = (seed..seed + 5).collect();
            let points = scaling_experiment(spec, &grid, &seeds)?;
            let scaling_path = out.join("scaling.csv");
            let file = File::create(&scaling_path).map_err(|e| io_err(&scaling_path, e))?;
            write_scaling_csv(&points, file)?;

            if !spec.model().graph().source_edges().is_empty() {
                let seeds: Vec<u64> = (seed..seed + 10).collect();
                let rows = sequential_benefit_experiment(spec, n, &seeds)?;
                let benefit_path = out.join("benefit.csv");
                let file = File::create(&benefit_path).map_err(|e| io_err(&benefit_path, e))?;
                write_benefit_csv(&rows, file)?;
            }
            log::info!("simulate: wrote artifacts to {}", out.display());
            Ok(0)
        }
    }
}

/// The gold labels induced by the latent element configurations, one row
/// per task, matching the `seq_id,task_index,label` reader.
fn write_gold_csv(
    path: &Path,
    model: &LabelModel,
    votes: &VoteTensor,
    latent: &[u32],
) -> Result<()> {
    let layout = model.layout();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["seq_id", "task_index", "label"])
        .map_err(|e| Error::Parse(format!("could not write gold: {e}")))?;
    for (seq, &config) in latent.iter().enumerate() {
        for task in 0..layout.n_tasks() {
            let label = layout.derived_label(task, config);
            w.write_record([
                votes.seq_ids()[seq].to_string(),
                (task + 1).to_string(),
                label.to_string(),
            ])
            .map_err(|e| Error::Parse(format!("could not write gold: {e}")))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loss-per-epoch trace written next to the parameters as
/// `<params>.loss.csv`.
fn write_loss_curve(params_path: &Path, curve: &[f64]) -> Result<()> {
    let mut name = params_path.file_name().unwrap_or_default().to_os_string();
    name.push(".loss.csv");
    let path = params_path.with_file_name(name);
    let mut file = File::create(&path).map_err(|e| io_err(&path, e))?;
    writeln!(file, "epoch,loss")?;
    for (epoch, loss) in curve.iter().enumerate() {
        writeln!(file, "{epoch},{loss:.16e}")?;
    }
    Ok(())
}
