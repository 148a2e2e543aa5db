use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use sals_core::cache::{factorize_streaming, StreamingCache};
use sals_core::cluster::run_distributed;
use sals_core::io::{load_model, read_coo, save_model, sniff_order, write_coo, CooFileSpec, IndexBase};
use sals_core::partition::{assign, load_stats, sequential_assign, AssignStrategy};
use sals_core::sgd::{psgd, SgdParams};
use sals_core::solver::{factorize_cdtf_detailed, factorize_detailed, IterationRecord};
use sals_core::synth::{generate_synthetic, SyntheticConfig};
use sals_core::{rmse, ColumnOrder, Error, Monitor, Regularization, SolverParams, SparseTensorStore, TensorEntry};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "sals", version, about = "Factorize partially observed sparse tensors")]
struct Cli {
    /// File of key=value lines supplying defaults for the subcommand's flags
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic low-rank tensor with a held-out test split
    #[command(args_override_self = true)]
    Generate(GenerateArgs),
    /// Factorize a COO tensor and write a convergence CSV and the model
    #[command(args_override_self = true)]
    Factorize(FactorizeArgs),
    /// Compare row-assignment strategies by per-machine load
    #[command(args_override_self = true)]
    PartitionStats(PartitionArgs),
    /// RMSE of a saved model on a COO file
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Alg {
    Cdtf,
    Sals,
    Als,
    Psgd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    InMemory,
    Streaming,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reg {
    Plain,
    Weighted,
}

#[derive(Clone, Copy, ValueEnum)]
enum Assign {
    Greedy,
    Sequential,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    Random,
    Fixed,
}

impl From<Assign> for AssignStrategy {
    fn from(a: Assign) -> Self {
        match a {
            Assign::Greedy => AssignStrategy::Greedy,
            Assign::Sequential => AssignStrategy::Sequential,
            Assign::Random => AssignStrategy::Random,
        }
    }
}

fn parse_base(s: &str) -> Result<IndexBase, String> {
    match s {
        "0" => Ok(IndexBase::Zero),
        "1" => Ok(IndexBase::One),
        _ => Err("index base must be 0 or 1".into()),
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Mode lengths, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    #[arg(long)]
    nnz: usize,
    /// Ground-truth rank
    #[arg(short = 'K', long = "rank", default_value_t = 5)]
    rank: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_base, default_value = "1")]
    index_base: IndexBase,
    /// Generate even when the shape is beyond a single workstation
    #[arg(long)]
    allow_large: bool,
}

#[derive(Args)]
struct FactorizeArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output directory for convergence.csv and the model
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Alg::Sals)]
    alg: Alg,
    #[arg(short = 'K', long = "rank", default_value_t = 10)]
    rank: usize,
    /// Columns per subset (default: min(K, 10))
    #[arg(short = 'C', long = "columns")]
    columns: Option<usize>,
    #[arg(long)]
    t_in: Option<usize>,
    #[arg(long, default_value_t = 10)]
    t_out: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = Reg::Plain)]
    reg: Reg,
    #[arg(long, default_value_t = 0.01)]
    eta0: f64,
    #[arg(short = 'M', long = "machines", default_value_t = 1)]
    machines: usize,
    #[arg(long, value_enum, default_value_t = Assign::Greedy)]
    assign: Assign,
    #[arg(long, value_enum, default_value_t = Mode::InMemory)]
    mode: Mode,
    #[arg(long, value_enum)]
    column_order: Option<Order>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_base, default_value = "1")]
    index_base: IndexBase,
    /// Tensor order (default: inferred from the first line)
    #[arg(long)]
    order: Option<usize>,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(short = 'M', long = "machines")]
    machines: usize,
    /// Only this strategy (default: all three)
    #[arg(long, value_enum)]
    assign: Option<Assign>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the assignment of --assign here
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_base, default_value = "1")]
    index_base: IndexBase,
    #[arg(long)]
    order: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory holding factor_1.txt, factor_2.txt, ...
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_parser = parse_base, default_value = "1")]
    index_base: IndexBase,
}

/// Splices `--key value` pairs from the config file in front of the
/// subcommand's own flags, so later (command-line) occurrences win.
fn expand_config(mut argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = match argv[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => argv.get(pos + 1).cloned().ok_or("--config needs a file")?,
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let mut injected = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{path}:{}: expected key=value", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let flag = if key.len() == 1 { format!("-{key}") } else { format!("--{key}") };
        match value {
            "true" => injected.push(flag),
            "false" => {}
            _ => injected.extend([flag, value.to_string()]),
        }
    }
    const SUBCOMMANDS: [&str; 4] = ["generate", "factorize", "partition-stats", "evaluate"];
    let sub = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str()));
    match sub {
        Some(i) => {
            argv.splice(i + 1..i + 1, injected);
            Ok(argv)
        }
        None => Ok(argv),
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidParameter(_) => EXIT_USAGE,
            Error::Numerical(_) => EXIT_NUMERICAL,
            Error::Worker { .. } => EXIT_FAILURE,
            _ => EXIT_IO,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(m) => {
            eprintln!("error: {m}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Factorize(a) => cmd_factorize(a),
        Command::PartitionStats(a) => cmd_partition_stats(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> CliResult<()> {
    let config = SyntheticConfig {
        dims: a.dims,
        nnz: a.nnz,
        rank: a.rank,
        noise_sigma: a.noise,
        test_fraction: a.test_fraction,
        seed: a.seed,
    };
    config.validate()?;
    if !config.is_desk_scale() {
        warn!("shape {:?} with {} entries is beyond desk scale", config.dims, config.nnz);
        if !a.allow_large {
            return Err(usage("refusing to generate a tensor this large without --allow-large"));
        }
    }
    let data = generate_synthetic(&config)?;
    fs::create_dir_all(&a.out)?;
    let train: Vec<TensorEntry> = data.train.entries().collect();
    write_coo(&a.out.join("train.coo"), &train, a.index_base)?;
    write_coo(&a.out.join("test.coo"), &data.test, a.index_base)?;
    save_model(&a.out.join("truth"), &data.truth)?;
    println!(
        "wrote {} training and {} test entries to {}",
        train.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

fn read_input(path: &Path, order: Option<usize>, base: IndexBase) -> CliResult<(Vec<TensorEntry>, Vec<usize>)> {
    let order = match order {
        Some(o) => o,
        None => sniff_order(path)
            .map_err(|e| with_path(e, path))?
            .ok_or_else(|| usage(format!("cannot infer the order of empty file {}", path.display())))?,
    };
    let spec = CooFileSpec {
        index_base: base,
        ..CooFileSpec::new(order)
    };
    read_coo(path, &spec).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Failure {
    let mut f = Failure::from(e);
    if !f.message.contains(&*path.to_string_lossy()) {
        f.message = format!("{}: {}", path.display(), f.message);
    }
    f
}

fn solver_params(a: &FactorizeArgs) -> CliResult<SolverParams> {
    let mut p = match a.alg {
        Alg::Als => {
            if a.columns.is_some_and(|c| c != a.rank) || a.t_in.is_some_and(|t| t != 1) {
                return Err(usage("--alg als fixes C = K and --t-in 1"));
            }
            SolverParams::als(a.rank)
        }
        Alg::Cdtf => {
            if a.columns.is_some_and(|c| c != 1) {
                return Err(usage("--alg cdtf fixes C = 1"));
            }
            SolverParams::cdtf(a.rank)
        }
        _ => SolverParams::new(a.rank, a.columns.unwrap_or(a.rank.min(10))),
    };
    if let Some(t) = a.t_in {
        p.inner_iters = t;
    }
    p.outer_iters = a.t_out;
    p.lambda = a.lambda;
    p.regularization = match a.reg {
        Reg::Plain => Regularization::Plain,
        Reg::Weighted => Regularization::Weighted,
    };
    if let Some(o) = a.column_order {
        p.column_order = match o {
            Order::Random => ColumnOrder::RandomPerOuter,
            Order::Fixed => ColumnOrder::Fixed,
        };
    }
    p.seed = a.seed;
    p.validate()?;
    Ok(p)
}

fn convergence_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,wall_seconds,train_loss,test_rmse,params_sent,params_received,flops\n");
    for r in history {
        let rmse = r.test_rmse.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration,
            r.elapsed.as_secs_f64(),
            r.train_loss,
            rmse,
            r.params_sent,
            r.params_received,
            r.flops
        );
    }
    out
}

fn log_progress(r: &IterationRecord) -> ControlFlow<()> {
    match r.test_rmse {
        Some(t) => info!("iteration {}: loss {:.6e}, test rmse {:.6}", r.iteration, r.train_loss, t),
        None => info!("iteration {}: loss {:.6e}", r.iteration, r.train_loss),
    }
    ControlFlow::Continue(())
}

fn cmd_factorize(a: FactorizeArgs) -> CliResult<()> {
    if a.machines == 0 {
        return Err(usage("-M must be at least 1"));
    }
    let (train, mut dims) = read_input(&a.train, a.order, a.index_base)?;
    let order = dims.len();
    let test = match &a.test {
        Some(path) => {
            let (test, test_dims) = read_input(path, Some(order), a.index_base)?;
            for (d, t) in dims.iter_mut().zip(test_dims) {
                *d = (*d).max(t);
            }
            test
        }
        None => Vec::new(),
    };
    let store = SparseTensorStore::build(train, &dims)?;
    if store.is_empty() {
        return Err(usage("training file has no entries"));
    }
    fs::create_dir_all(&a.out)?;
    let monitor = || Monitor::new().with_test(&test).on_iteration(log_progress);

    let (model, history) = match a.alg {
        Alg::Psgd => {
            if a.mode == Mode::Streaming {
                return Err(usage("--mode streaming supports the SALS family only"));
            }
            if matches!(a.reg, Reg::Weighted) {
                return Err(usage("--alg psgd uses plain regularization"));
            }
            let params = SgdParams {
                rank: a.rank,
                lambda: a.lambda,
                eta0: a.eta0,
                outer_iters: a.t_out,
                shards: a.machines,
                seed: a.seed,
            };
            psgd(&store, &params, monitor())?
        }
        _ => {
            let params = solver_params(&a)?;
            match (a.mode, a.machines) {
                (Mode::Streaming, 1) => {
                    let assignment = sequential_assign(&store, 1)?;
                    let cache = StreamingCache::build(&a.out.join("cache"), &store, &assignment)?;
                    let counts: Vec<Vec<usize>> = (0..order)
                        .map(|n| (0..dims[n]).map(|i| store.row_count(n, i)).collect())
                        .collect();
                    let out = factorize_streaming(&cache, &counts, &params, monitor())?;
                    info!("peak resident factor values: {}", out.peak_resident);
                    (out.model, out.history)
                }
                (Mode::Streaming, _) => return Err(usage("--mode streaming runs on a single machine (-M 1)")),
                (Mode::InMemory, 1) => {
                    let out = match a.alg {
                        Alg::Cdtf => factorize_cdtf_detailed(&store, &params, monitor())?,
                        _ => factorize_detailed(&store, &params, monitor())?,
                    };
                    (out.model, out.history)
                }
                (Mode::InMemory, m) => {
                    let assignment = assign(&store, m, a.assign.into(), a.seed)?;
                    let out = run_distributed(&store, &params, &assignment, monitor())?;
                    fs::write(a.out.join("comm.csv"), out.log.to_csv())?;
                    (out.model, out.history)
                }
            }
        }
    };
    fs::write(a.out.join("convergence.csv"), convergence_csv(&history))?;
    save_model(&a.out.join("model"), &model)?;
    if let Some(last) = history.last() {
        match last.test_rmse {
            Some(t) => println!("iterations {}, train loss {}, test rmse {}", last.iteration, last.train_loss, t),
            None => println!("iterations {}, train loss {}", last.iteration, last.train_loss),
        }
    }
    Ok(())
}

fn cmd_partition_stats(a: PartitionArgs) -> CliResult<()> {
    if a.machines == 0 {
        return Err(usage("-M must be at least 1"));
    }
    let (entries, dims) = read_input(&a.train, a.order, a.index_base)?;
    let store = SparseTensorStore::build(entries, &dims)?;
    if a.out.is_some() && a.assign.is_none() {
        return Err(usage("--out needs a single --assign strategy"));
    }
    let strategies = match a.assign {
        Some(s) => vec![AssignStrategy::from(s)],
        None => vec![AssignStrategy::Sequential, AssignStrategy::Random, AssignStrategy::Greedy],
    };
    println!("strategy\tmode\tmax_entries\tmean_entries\tmax_rows\tmean_rows");
    for strategy in &strategies {
        let assignment = assign(&store, a.machines, *strategy, a.seed)?;
        let report = load_stats(&store, &assignment);
        for (n, m) in report.modes.iter().enumerate() {
            println!(
                "{strategy}\t{}\t{}\t{:.2}\t{}\t{:.2}",
                n + 1,
                m.max_entries,
                m.mean_entries,
                m.max_rows,
                m.mean_rows
            );
        }
        if let Some(out) = &a.out {
            fs::write(out, assignment.to_text())?;
        }
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let model = load_model(&a.model, 0.0).map_err(|e| with_path(e, &a.model))?;
    let spec = CooFileSpec {
        index_base: a.index_base,
        dims: Some(model.dims().to_vec()),
        ..CooFileSpec::new(model.order())
    };
    let (test, _) = read_coo(&a.test, &spec).map_err(|e| with_path(e, &a.test))?;
    if test.is_empty() {
        return Err(usage(format!("{} has no entries", a.test.display())));
    }
    println!("{}", rmse(&model, &test)?);
    Ok(())
}
