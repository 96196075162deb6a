//! `bplab`: synthesize corpora, extract labeled branches, train and
//! evaluate the model, and annotate IR with predicted branch weights.

mod config;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bplab::dataset::{read_csv, read_csv_with_split, split_assignment, write_csv, write_csv_with_split, ExtractOptions, Split};
use bplab::eval::{render_report, report_markdown};
use bplab::features::{EmbedSpec, DEFAULT_CONST_THRESHOLD};
use bplab::heuristics::HeuristicConfig;
use bplab::model::{load_model, save_model, EpochStats, LossKind, ModelSpec};
use bplab::pipeline::{annotate_file, evaluate, extract_from_dir, fit_and_train, ir_paths, read_ir_file};
use bplab::synth::{generate_module, profile_module, write_corpus, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "bplab", version, about = "Static branch probability estimation", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic IR corpus with a profile.
    Synth(SynthArgs),
    /// Turn IR files and a profile into a labeled dataset.
    Extract(ExtractArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Compare the model and the heuristics on a dataset.
    Eval(EvalArgs),
    /// Annotate IR files with predicted branch weights.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    functions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    functions_per_file: usize,
    #[arg(long, default_value_t = 0.15)]
    loop_prob: f64,
    #[arg(long, default_value_t = 2)]
    max_loop_depth: usize,
    #[arg(long, default_value_t = 0.15)]
    error_path_prob: f64,
    #[arg(long, default_value_t = 4.0)]
    trip_count_mean: f64,
    /// Random walks per function when profiling.
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    #[arg(long, default_value_t = 0.4)]
    beta_shape: f64,
    #[arg(long, default_value_t = 150)]
    templates: usize,
    #[arg(long, default_value_t = 0.5)]
    file_shift_sd: f64,
    #[arg(long, default_value_t = 0.5)]
    branch_noise_sd: f64,
    #[arg(long, default_value_t = 6)]
    max_statements: usize,
    /// Skip writing truth.csv.
    #[arg(long)]
    no_truth: bool,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            n_functions: self.functions,
            seed: self.seed,
            functions_per_file: self.functions_per_file,
            loop_prob: self.loop_prob,
            max_loop_depth: self.max_loop_depth,
            error_path_prob: self.error_path_prob,
            trip_count_mean: self.trip_count_mean,
            trials_per_function: self.trials,
            beta_shape: self.beta_shape,
            n_templates: self.templates,
            file_shift_sd: self.file_shift_sd,
            branch_noise_sd: self.branch_noise_sd,
            max_statements: self.max_statements,
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct ExtractArgs {
    #[arg(long)]
    ir: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONST_THRESHOLD)]
    const_threshold: i64,
    #[arg(long, default_value_t = HeuristicConfig::default().p_backedge)]
    heur_backedge: f64,
    #[arg(long, default_value_t = HeuristicConfig::default().p_expect)]
    heur_expect: f64,
    /// Probability that a null or float-equality compare is true.
    #[arg(long, default_value_t = HeuristicConfig::default().p_null_cmp_eq_true)]
    heur_unlikely_cmp: f64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch losses; defaults to history.csv next to the model.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    hidden_layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden_width: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 200)]
    batch: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// mae, mse or ce.
    #[arg(long, default_value = "ce")]
    loss: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.10)]
    test_fraction: f64,
    /// Weight each example's loss by its sample count.
    #[arg(long)]
    weighted: bool,
    #[arg(long, default_value_t = 8)]
    callee_embed_dim: usize,
    #[arg(long, default_value_t = 8)]
    file_embed_dim: usize,
    /// Strings seen fewer times share the out-of-vocabulary embedding.
    #[arg(long, default_value_t = EmbedSpec::default().min_count)]
    min_count: usize,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct PredictArgs {
    #[arg(long)]
    ir: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONST_THRESHOLD)]
    const_threshold: i64,
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = args.config();
    cfg.validate()?;
    let (module, truth) = generate_module(&cfg)?;
    let profile = profile_module(&module, &truth, cfg.trials_per_function, cfg.seed);
    let truth = (!args.no_truth).then_some(&truth);
    write_corpus(&args.out, &module, &profile, truth)?;
    println!("functions {}", module.functions.len());
    println!("branches {}", profile.len());
    Ok(())
}

fn cmd_extract(args: &ExtractArgs) -> Result<()> {
    let heuristics = HeuristicConfig {
        p_backedge: args.heur_backedge,
        p_expect: args.heur_expect,
        p_null_cmp_eq_true: args.heur_unlikely_cmp,
        ..Default::default()
    };
    heuristics.validate()?;
    let opts = ExtractOptions {
        heuristics,
        const_threshold: args.const_threshold,
    };
    let (examples, stats) = extract_from_dir(&args.ir, &args.profile, &opts)?;
    ensure_parent(&args.out)?;
    write_csv(&examples, &args.out)?;
    println!("functions {}", stats.functions);
    println!("total branches {}", stats.total_branches);
    println!("profiled {}", stats.profiled);
    println!("unique {}", stats.unique);
    Ok(())
}

/// Creates the directory an output file will be written into.
fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())
        }
        _ => Ok(()),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,valid_loss\n");
    for h in history {
        let valid = h.valid_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:.6},{valid}", h.epoch, h.train_loss);
    }
    out
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let Some(loss) = LossKind::from_name(&args.loss) else {
        bail!("unknown loss `{}` (expected mae, mse or ce)", args.loss);
    };
    let spec = ModelSpec {
        hidden_layers: args.hidden_layers,
        hidden_width: args.hidden_width,
        callee_embed_dim: args.callee_embed_dim,
        file_embed_dim: args.file_embed_dim,
        loss,
        batch_size: args.batch,
        epochs: args.epochs,
        learning_rate: args.lr,
        seed: args.seed,
        weighted: args.weighted,
        ..Default::default()
    };
    spec.validate()?;
    if !(args.test_fraction > 0.0 && args.test_fraction < 1.0) {
        bail!("--test-fraction must lie in (0, 1)");
    }
    if args.min_count == 0 {
        bail!("--min-count must be positive");
    }

    let examples = read_csv(&args.data)?;
    let splits = split_assignment(examples.len(), args.test_fraction, args.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (e, s) in examples.iter().zip(&splits) {
        match s {
            Split::Train => train.push(e.clone()),
            Split::Test => test.push(e.clone()),
        }
    }
    let embed = EmbedSpec {
        min_count: args.min_count,
    };
    let (model, history) = fit_and_train(spec, embed, &train, &test)?;

    ensure_parent(&args.out)?;
    save_model(&model, &args.out)?;
    let history_path = args
        .history
        .clone()
        .unwrap_or_else(|| args.out.with_file_name("history.csv"));
    ensure_parent(&history_path)?;
    std::fs::write(&history_path, history_csv(&history)).with_context(|| history_path.display().to_string())?;
    let split_path = sibling(&args.data, ".split.csv");
    write_csv_with_split(&examples, &splits, &split_path)?;

    println!("train {} test {}", train.len(), test.len());
    if let Some(last) = history.last() {
        let valid = last.valid_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into());
        println!("final train loss {:.6} valid loss {valid}", last.train_loss);
    }
    println!("split written to {}", split_path.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (examples, splits) = read_csv_with_split(&args.data)?;
    let (examples, subset) = match splits {
        Some(splits) => (
            examples
                .into_iter()
                .zip(splits)
                .filter(|(_, s)| *s == Split::Test)
                .map(|(e, _)| e)
                .collect::<Vec<_>>(),
            "held-out",
        ),
        None => (examples, "all"),
    };
    if examples.is_empty() {
        bail!("{}: no {subset} rows to evaluate", args.data.display());
    }
    let ev = evaluate(&model, &examples)?;
    std::fs::create_dir_all(&args.out).with_context(|| args.out.display().to_string())?;
    render_report(&ev.ml, &ev.heuristic, &ev.ml_cdf, &ev.heuristic_cdf, &ev.breakdown, &args.out)?;
    println!("evaluated {} {subset} rows", examples.len());
    let md = report_markdown(&ev.ml, &ev.heuristic, &ev.breakdown);
    for line in md.lines().filter(|l| l.starts_with("| ML |") || l.starts_with("| Heuristics |")) {
        println!("{line}");
    }
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let paths = ir_paths(&args.ir)?;
    if paths.is_empty() {
        bail!("no .ir files in {}", args.ir.display());
    }
    std::fs::create_dir_all(&args.out).with_context(|| args.out.display().to_string())?;
    let mut total = 0;
    for path in &paths {
        let file = read_ir_file(path)?;
        let (text, n) = annotate_file(&model, &file, args.const_threshold)?;
        let dest = args.out.join(path.file_name().expect("file path"));
        std::fs::write(&dest, text).with_context(|| dest.display().to_string())?;
        total += n;
    }
    println!("annotated {total} branches in {} files", paths.len());
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("BPLAB_THREADS") else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("BPLAB_THREADS=`{value}` is not a thread count"))?;
    // 0 keeps rayon's default of one thread per core.
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

/// Joins an error and its causes, skipping causes whose text the message
/// already contains (the library errors print their I/O source inline).
fn error_chain(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

/// Prints `error: ...` as a single line.
fn report_error(msg: &str) -> ExitCode {
    let msg = msg.trim().trim_start_matches("error: ");
    let line = msg.split('\n').map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    let _ = writeln!(std::io::stderr(), "error: {line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let args = match config::expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return report_error(&error_chain(&e)),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            return report_error(rendered.lines().next().unwrap_or("invalid arguments"));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&error_chain(&e)),
    }
}
