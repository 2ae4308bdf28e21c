//! `transduct`: transductive classification of pre-computed embeddings.

mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use transduct_core::fewshot::{run_fewshot, FewShotOptions, GammaChoice};
use transduct_core::io::{read_embeddings, read_labels, read_predictions, write_predictions};
use transduct_core::solver::write_trace_csv;
use transduct_core::synth::{generate_task, write_task_dir, SynthParams};
use transduct_core::zero_shot::hard_predict;
use transduct_core::{run, top1_accuracy, Hyperparams, SolverState, Support, TaskSpec};

const THREADS_ENV: &str = "TRANSDUCT_THREADS";

#[derive(Parser)]
#[command(
    name = "transduct",
    version,
    about = "Transductive classification of embedding batches"
)]
struct Cli {
    /// Worker threads (default: TRANSDUCT_THREADS, else one per core).
    /// Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// key=value file of flags; flags on the command line take precedence
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Zero-shot transduction from query and text embeddings
    #[command(args_override_self = true)]
    RunZs(RunZs),
    /// Few-shot transduction with a labeled support set
    #[command(args_override_self = true)]
    RunFs(RunFs),
    /// Write a seeded synthetic task directory
    #[command(args_override_self = true)]
    Synth(Synth),
    /// Score a predictions CSV against ground-truth labels
    #[command(args_override_self = true)]
    Eval(Eval),
}

#[derive(Args)]
struct SolveArgs {
    /// Query embeddings (EMB1, or CSV if the name ends in .csv)
    #[arg(long, value_name = "FILE")]
    query: PathBuf,
    /// Text prototypes, one row per class
    #[arg(long, value_name = "FILE")]
    text: PathBuf,
    /// Softmax temperature applied to query-text cosines
    #[arg(long, default_value_t = 100.0)]
    tau: f64,
    /// Predictions CSV
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Objective trace CSV
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// kNN graph edge list ("i j w" per line)
    #[arg(long, value_name = "FILE")]
    graph_dump: Option<PathBuf>,
    /// Query ground-truth labels; prints accuracies
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
    /// Outer iterations of the block updates
    #[arg(long, default_value_t = Hyperparams::OUTER_ITERS)]
    outer_iters: usize,
    /// Assignment sweeps per outer iteration
    #[arg(long, default_value_t = Hyperparams::INNER_Z_ITERS)]
    inner_iters: usize,
    /// Neighbors per node in the affinity graph
    #[arg(long, default_value_t = Hyperparams::K_NN)]
    knn: usize,
    /// Confident samples per class averaged into the initial means
    #[arg(long, default_value_t = Hyperparams::TOP_M_INIT)]
    top_m: usize,
    /// Union the kNN graph with its transpose
    #[arg(long)]
    symmetrize_graph: bool,
}

#[derive(Args)]
struct RunZs {
    #[command(flatten)]
    solve: SolveArgs,
    /// Weight of the text-prior term
    #[arg(long, default_value_t = Hyperparams::LAMBDA_ZERO_SHOT)]
    lambda: f64,
}

#[derive(Args)]
struct RunFs {
    #[command(flatten)]
    solve: SolveArgs,
    /// Weight of the text-prior term
    #[arg(long, default_value_t = Hyperparams::LAMBDA_FEW_SHOT)]
    lambda: f64,
    /// Labeled support embeddings
    #[arg(long, value_name = "FILE")]
    support: PathBuf,
    /// Support labels, one per line
    #[arg(long, value_name = "FILE")]
    support_labels: PathBuf,
    /// Labeled pool for validation shots; without it they are carved out of
    /// the support
    #[arg(long, value_name = "FILE", requires = "validation_labels")]
    validation: Option<PathBuf>,
    /// Validation pool labels, one per line
    #[arg(long, value_name = "FILE", requires = "validation")]
    validation_labels: Option<PathBuf>,
    /// Fixed support weight; skips the search
    #[arg(long, conflicts_with = "gamma_grid")]
    gamma: Option<f64>,
    /// Support weights to search
    #[arg(long, value_delimiter = ',', default_value = "0.002,0.01,0.02,0.2")]
    gamma_grid: Vec<f64>,
    /// Search score table CSV
    #[arg(long, value_name = "FILE")]
    scores: Option<PathBuf>,
    /// Seed for drawing validation shots
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Synth {
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    query_per_class: usize,
    /// Support (and validation) shots per class; 0 for none
    #[arg(long, default_value_t = 4)]
    shots: usize,
    /// Cluster separation
    #[arg(long, default_value_t = 3.0)]
    sep: f64,
    /// Text prototype noise
    #[arg(long, default_value_t = 0.6)]
    noise: f64,
    /// Temperature recorded in the task config
    #[arg(long, default_value_t = 30.0)]
    tau: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct Eval {
    /// Predictions CSV
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    /// Ground-truth labels
    #[arg(long, value_name = "FILE")]
    truth: PathBuf,
}

impl SolveArgs {
    fn hyper(&self, lambda: f64) -> Hyperparams {
        Hyperparams {
            lambda,
            gamma: 0.0,
            outer_iters: self.outer_iters,
            inner_z_iters: self.inner_iters,
            k_nn: self.knn,
            top_m_init: self.top_m,
            symmetrize_graph: self.symmetrize_graph,
        }
    }

    fn task(&self, lambda: f64, support: Option<Support>) -> Result<TaskSpec> {
        Ok(TaskSpec {
            query: read_embeddings(&self.query)?,
            text: read_embeddings(&self.text)?,
            support,
            temperature: self.tau,
            hyper: self.hyper(lambda),
        })
    }

    fn truth(&self) -> Result<Option<Vec<usize>>> {
        self.truth.as_ref().map(|p| Ok(read_labels(p)?)).transpose()
    }

    /// Writes the requested output files and prints accuracies.
    fn finish(&self, state: &SolverState, truth: Option<&[usize]>) -> Result<()> {
        if let Some(path) = &self.out {
            write_predictions(&state.query_assignments(), path)?;
        }
        if let Some(path) = &self.trace {
            write_trace_csv(&state.objective_trace, create(path)?)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        if let Some(path) = &self.graph_dump {
            state
                .graph
                .write_edges(create(path)?)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        if let Some(truth) = truth {
            let zero_shot = top1_accuracy(&hard_predict(state.soft_labels()), truth)?;
            let transduced = top1_accuracy(&state.predictions(), truth)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "zero-shot accuracy: {zero_shot:.4}")?;
            writeln!(out, "transduced accuracy: {transduced:.4}")?;
        }
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn read_support(embeddings: &Path, labels: &Path) -> Result<Support> {
    Ok(Support {
        embeddings: read_embeddings(embeddings)?,
        labels: read_labels(labels)?,
    })
}

fn run_zs(args: &RunZs) -> Result<()> {
    let spec = args.solve.task(args.lambda, None)?;
    let truth = args.solve.truth()?;
    let (_, state) = run(&spec)?;
    args.solve.finish(&state, truth.as_deref())
}

fn run_fs(args: &RunFs) -> Result<()> {
    let support = read_support(&args.support, &args.support_labels)?;
    let spec = args.solve.task(args.lambda, Some(support))?;
    let validation_pool = match (&args.validation, &args.validation_labels) {
        (Some(emb), Some(labels)) => {
            let pool = read_support(emb, labels)?;
            if pool.embeddings.dim() != spec.query.dim() {
                bail!(transduct_core::Error::DimensionMismatch {
                    what: "validation embeddings",
                    expected: spec.query.dim(),
                    found: pool.embeddings.dim(),
                });
            }
            if pool.labels.len() != pool.embeddings.n_rows() {
                bail!(transduct_core::Error::LengthMismatch {
                    what: "validation labels",
                    expected: pool.embeddings.n_rows(),
                    found: pool.labels.len(),
                });
            }
            Some(pool)
        }
        _ => None,
    };
    let truth = args.solve.truth()?;
    let gamma = match args.gamma {
        Some(g) => GammaChoice::Fixed(g),
        None => GammaChoice::Search(args.gamma_grid.clone()),
    };
    let outcome = run_fewshot(
        &spec,
        &FewShotOptions {
            gamma,
            lambda: Some(args.lambda),
            validation_pool,
            seed: args.seed,
        },
    )?;

    let mut out = std::io::stdout().lock();
    writeln!(out, "gamma: {}", outcome.gamma)?;
    if let Some(search) = &outcome.search {
        search.write_csv(&mut out)?;
        if let Some(path) = &args.scores {
            search
                .write_csv(create(path)?)
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    drop(out);
    args.solve.finish(&outcome.state, truth.as_deref())
}

fn synth(args: &Synth) -> Result<()> {
    let params = SynthParams {
        classes: args.classes,
        dim: args.dim,
        query_per_class: args.query_per_class,
        shots_per_class: args.shots,
        class_sep: args.sep,
        prototype_noise: args.noise,
        tau: args.tau,
        seed: args.seed,
    };
    let task = generate_task(&params)?;
    write_task_dir(&task, &params, &args.out)?;
    Ok(())
}

fn eval(args: &Eval) -> Result<()> {
    let predicted = read_predictions(&args.pred)?;
    let truth = read_labels(&args.truth)?;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "top-1 accuracy: {:.4}",
        top1_accuracy(&predicted, &truth)?
    )?;
    let n_classes = truth.iter().copied().max().map_or(0, |m| m + 1);
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (&p, &t) in predicted.iter().zip(&truth) {
        totals[t] += 1;
        hits[t] += usize::from(p == t);
    }
    for (class, (&h, &n)) in hits.iter().zip(&totals).enumerate() {
        if n > 0 {
            writeln!(
                out,
                "class {class}: {:.4} ({n} samples)",
                h as f64 / n as f64
            )?;
        }
    }
    Ok(())
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| {
            format!("{THREADS_ENV}={v:?} is not a thread count")
        })?)),
        Err(_) => Ok(None),
    }
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::RunZs(a) => run_zs(a),
        Command::RunFs(a) => run_fs(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
    }
}

fn main_inner(args: Vec<OsString>) -> Result<()> {
    let args = config::expand(args, &Cli::command())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            e.print()?;
            return Ok(());
        }
        Err(e) => bail!(e
            .render()
            .to_string()
            .trim_end()
            .trim_start_matches("error: ")
            .to_string()),
    };
    match threads(cli.threads)? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(|| dispatch(&cli.command)),
        None => dispatch(&cli.command),
    }
}

/// The error chain joined by ": ", skipping causes whose text the
/// previous message already contains.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let message = cause.to_string();
        if !text.contains(&message) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&message);
        }
    }
    text
}

/// A closed stdout (e.g. piping into `head`) is not a failure.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    match main_inner(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
