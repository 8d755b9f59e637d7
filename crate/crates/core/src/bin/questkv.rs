use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use questkv::error::QuestError;
use questkv::experiments::{
    recall_rows, run_bench, simulate_gaussian_seeds, simulate_recall, traffic_row, write_csv,
    BenchExperiment, RecallExperiment, TrafficExperiment,
};
use questkv::policies::PolicyKind;
use questkv::verify::{self, VerifyConfig};
use questkv::workloads::{
    gaussian_meta, gen_gaussian_trace, gen_needle_trace, read_trace, write_trace, NeedleSpec,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const EXIT_RUNTIME: u8 = 1;

#[derive(Parser)]
#[command(
    name = "questkv",
    version,
    about = "Query-aware paged KV cache experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suites and print a pass/fail table.
    Verify(VerifyArgs),
    /// Simulate decoding and report recall@n per policy and budget.
    Recall(RecallArgs),
    /// Modeled vs counted KV traffic for a Quest decode step.
    Traffic(TrafficArgs),
    /// CPU wall-clock per decode-step stage, with bytes touched.
    Bench(BenchArgs),
    /// Generate a trace file.
    Gen(GenArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Suites to run (default: all).
    #[arg(long, value_delimiter = ',')]
    suite: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiplier on the number of random instances per suite.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct RecallArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "quest,h2o,tova,streaming"
    )]
    policy: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256,512")]
    budget: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    page_size: usize,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    #[arg(long, default_value_t = 4096)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of seeded traces (seed, seed+1, ...). Ignored with --trace.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Read the decode trace from a file instead of generating one.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Top-n cutoff for recall.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    force_include_recent: bool,
    /// Emit only mean rows.
    #[arg(long)]
    summary: bool,
    /// Skip output-error computation (recorded as NaN).
    #[arg(long)]
    no_output_error: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrafficArgs {
    #[arg(long, value_delimiter = ',', default_value = "16")]
    page_size: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4096")]
    budget: Vec<usize>,
    #[arg(long, default_value_t = 65536)]
    length: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    #[arg(long, default_value_t = 2)]
    bytes_per_element: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    force_include_recent: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "2048")]
    budget: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    page_size: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    #[arg(long, default_value_t = 32768)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    force_include_recent: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceKind {
    Gaussian,
    Needle,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    kind: TraceKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4096)]
    length: usize,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    /// Needle token index (default: middle of the trace).
    #[arg(long)]
    needle_position: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    alignment: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_scale: f64,
    /// Trace file to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV file for the trace metadata (stdout otherwise).
    #[arg(long)]
    meta: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Verify,
    Runtime(String),
}

impl From<QuestError> for Failure {
    fn from(e: QuestError) -> Self {
        match e {
            QuestError::InvalidConfig(_)
            | QuestError::InvalidArgument(_)
            | QuestError::UnknownPolicy(_)
            | QuestError::DimensionMismatch { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    match path {
        Some(p) => File::create(p)
            .map(|f| Box::new(BufWriter::new(f)) as Box<dyn Write>)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display()))),
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn cmd_verify(args: VerifyArgs) -> Result<(), Failure> {
    let suites = if args.suite.is_empty() {
        verify::SUITES.iter().map(|s| s.to_string()).collect()
    } else {
        args.suite
    };
    for s in &suites {
        if !verify::SUITES.contains(&s.as_str()) {
            return Err(Failure::Config(format!(
                "unknown suite `{s}` (known: {})",
                verify::SUITES.join(", ")
            )));
        }
    }
    if args.scale.is_nan() || args.scale <= 0.0 {
        return Err(Failure::Config("--scale must be positive".into()));
    }
    let cfg = VerifyConfig {
        seed: args.seed,
        scale: args.scale,
        inject_fault: args.inject_fault,
        suites,
    };
    let results = verify::run(&cfg)?;
    println!(
        "{:<14} {:>6} {:>10} {:>9}  detail",
        "suite", "status", "checks", "failures"
    );
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{:<14} {:>6} {:>10} {:>9}  {}",
            r.name,
            if r.passed() { "PASS" } else { "FAIL" },
            r.checks,
            r.failures,
            r.detail
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn cmd_recall(args: RecallArgs) -> Result<(), Failure> {
    let policies = args
        .policy
        .iter()
        .map(|p| p.parse::<PolicyKind>())
        .collect::<Result<Vec<_>, _>>()?;
    let exp = RecallExperiment {
        page_size: args.page_size,
        policies,
        budgets: args.budget,
        n: args.n,
        force_include_recent: args.force_include_recent,
    };
    let with_error = !args.no_output_error;
    let results = match &args.trace {
        Some(path) => {
            let trace = read_trace(path)?;
            vec![(args.seed, simulate_recall(&trace, &exp, with_error)?)]
        }
        None => {
            if args.reps == 0 {
                return Err(Failure::Config("--reps must be >= 1".into()));
            }
            let seeds: Vec<u64> = (0..args.reps as u64).map(|i| args.seed + i).collect();
            simulate_gaussian_seeds(&seeds, args.length, args.head_dim, &exp, with_error)?
        }
    };
    let rows = recall_rows(&results, !args.summary);
    write_csv(output(args.out.as_deref())?, &rows)?;
    Ok(())
}

fn cmd_traffic(args: TrafficArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for &budget in &args.budget {
        let exp = TrafficExperiment {
            token_count: args.length,
            token_budget: budget,
            head_dim: args.head_dim,
            bytes_per_element: args.bytes_per_element,
            seed: args.seed,
            force_include_recent: args.force_include_recent,
        };
        for &page_size in &args.page_size {
            let (row, _) = traffic_row(&exp, page_size)?;
            if row.exceeds_dense {
                eprintln!(
                    "warning: page_size={} budget={} loads {:.4} of dense traffic; metadata overhead exceeds the savings",
                    row.page_size, row.token_budget, row.fraction_model
                );
            }
            rows.push(row);
        }
    }
    write_csv(output(args.out.as_deref())?, &rows)?;
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for &budget in &args.budget {
        rows.extend(run_bench(&BenchExperiment {
            token_count: args.length,
            token_budget: budget,
            page_size: args.page_size,
            head_dim: args.head_dim,
            seed: args.seed,
            reps: args.reps,
            warmup: args.warmup,
            force_include_recent: args.force_include_recent,
        })?);
    }
    write_csv(output(args.out.as_deref())?, &rows)?;
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<(), Failure> {
    let (trace, meta) = match args.kind {
        TraceKind::Gaussian => (
            gen_gaussian_trace(args.seed, args.length, args.head_dim)?,
            gaussian_meta(args.seed, args.length, args.head_dim),
        ),
        TraceKind::Needle => {
            let spec = NeedleSpec {
                needle_position: args.needle_position.unwrap_or(args.length / 2),
                alignment: args.alignment,
                noise_scale: args.noise_scale,
            };
            let nt = gen_needle_trace(args.seed, args.length, args.head_dim, spec)?;
            (nt.trace, nt.meta)
        }
    };
    write_trace(&args.out, &trace)?;
    meta.write_csv(output(args.meta.as_deref())?)?;
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("QUESTKV_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::Config(format!("QUESTKV_THREADS={v} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Recall(a) => cmd_recall(a),
        Command::Traffic(a) => cmd_traffic(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gen(a) => cmd_gen(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Verify) => {
            eprintln!("verification failed");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
