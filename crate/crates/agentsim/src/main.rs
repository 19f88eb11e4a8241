//! Command-line entry point: single runs, sweeps, golden replays, workload
//! generation, and report export.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use agentsim::config::{self, SimConfig};
use agentsim::gen::{self, Preset};
use agentsim::golden;
use agentsim::metrics::RunReport;
use agentsim::sched::Policy;
use agentsim::sim::{self, SimError};
use agentsim::workload::write_trace;

const EX_USAGE: u8 = 64;
const EX_NOINPUT: u8 = 66;

#[derive(Parser)]
#[command(name = "agentsim", version, about = "Program-aware LLM serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation from a config file and write its reports.
    Simulate(SimulateArgs),
    /// Run a lambda sweep across policies on paired traces.
    Sweep(SweepArgs),
    /// Replay a named worked example and check the published numbers.
    Golden {
        /// fig2 or fig9
        name: String,
    },
    /// Generate a JSONL trace from a preset.
    Gen(GenArgs),
    /// Re-export a previously written report.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML config path.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set scheduler.queue.beta=4.0
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default: $AGENTSIM_OUT or ./agentsim-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Comma-separated arrival rates.
    #[arg(long, value_delimiter = ',', required = true)]
    lambdas: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Comma-separated policies (default: fcfs,mlfq,plas).
    #[arg(long, value_delimiter = ',')]
    policies: Vec<String>,
}

#[derive(Args)]
struct GenArgs {
    /// sharegpt | bfcl | lats | mixed | fig2 | fig9
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Poisson arrival rate; omit for arrivals at t=0.
    #[arg(long)]
    arrival_rate: Option<f64>,
    /// Output path ("-" for stdout).
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Path to a report.json written by `simulate`.
    #[arg(long)]
    report: PathBuf,
    /// csv | json | gantt_csv | routing_csv
    #[arg(long, default_value = "csv")]
    format: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(EX_USAGE);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<SimError>()
                .map(|e| e.exit_code() as u8)
                .or_else(|| {
                    err.downcast_ref::<config::ConfigError>().map(|e| match e {
                        config::ConfigError::Io { .. } => EX_NOINPUT,
                        _ => 2,
                    })
                })
                .or_else(|| err.downcast_ref::<std::io::Error>().map(|_| EX_NOINPUT))
                .unwrap_or(2);
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Golden { name } => cmd_golden(&name),
        Command::Gen(args) => cmd_gen(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<SimConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|source| config::ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(config::parse_with_overrides(&text, overrides)?)
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("AGENTSIM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("agentsim-out"))
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config, &args.set)?;
    let dir = out_dir(args.out);
    std::fs::create_dir_all(&dir)?;
    eprintln!(
        "simulate: policy={} engines={} seed={}",
        cfg.scheduler.policy.name(),
        cfg.engine.count,
        cfg.seed
    );
    let (log, report) = sim::run(&cfg)?;
    write_file(&dir.join("report.json"), |w| {
        serde_json::to_writer_pretty(w, &report).map_err(std::io::Error::from)
    })?;
    write_file(&dir.join("report.csv"), |w| report.write_csv(w))?;
    write_file(&dir.join("events.csv"), |w| log.write_csv(w))?;
    write_file(&dir.join("gantt.csv"), |w| report.write_gantt_csv(w))?;
    write_file(&dir.join("routing.csv"), |w| report.write_routing_csv(w))?;
    eprintln!(
        "done: {} / {} programs in {} ticks; mean token latency {:.4}; wrote {}",
        report.completed_programs,
        report.total_programs,
        report.ticks,
        report.mean_token_latency,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn write_file<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
{
    let file =
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config, &args.set)?;
    let policies: Vec<Policy> = if args.policies.is_empty() {
        vec![Policy::Fcfs, Policy::Mlfq, Policy::Plas]
    } else {
        args.policies
            .iter()
            .map(|s| s.parse::<Policy>())
            .collect::<Result<_, _>>()?
    };
    eprintln!(
        "sweep: {} lambdas x {} reps x {} policies",
        args.lambdas.len(),
        args.reps,
        policies.len()
    );
    let rows = sim::sweep(&cfg, &args.lambdas, args.reps, &policies)?;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "lambda,policy,reps,mean_token_latency,p95_token_latency,p99_token_latency,completed"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.lambda,
            r.policy,
            r.reps,
            r.mean_token_latency,
            r.p95_token_latency,
            r.p99_token_latency,
            r.completed
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_golden(name: &str) -> Result<ExitCode> {
    let rows = match name {
        "fig2" => golden::golden_fig2()?,
        "fig9" => golden::golden_fig9()?,
        other => bail!("unknown golden replay {other:?} (expected fig2 or fig9)"),
    };
    let mut all_pass = true;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "{:<38} {:>9} {:>9}  result",
        "check", "expected", "actual"
    )?;
    for r in &rows {
        all_pass &= r.pass;
        writeln!(
            out,
            "{:<38} {:>9} {:>9}  {}",
            r.name,
            r.expected,
            r.actual,
            if r.pass { "PASS" } else { "FAIL" }
        )?;
    }
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode> {
    let programs = match gen::preset(&args.preset)? {
        Preset::Fixed(programs) => programs,
        Preset::Gen(mixture) => {
            let online = args.arrival_rate.is_some();
            let rate = args.arrival_rate.unwrap_or(1.0);
            if online {
                sim::generate_workload(&mixture, args.count, rate, args.seed, true)?
            } else {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
                let width = args.count.to_string().len().max(5);
                (0..args.count)
                    .map(|i| {
                        gen::gen_from_mixture(&mixture, &mut rng, format!("p{i:0width$}"), 0.0)
                    })
                    .collect::<Result<_, _>>()?
            }
        }
    };
    if args.out == "-" {
        write_trace(std::io::stdout().lock(), &programs)?;
    } else {
        let file = std::fs::File::create(&args.out)
            .with_context(|| format!("creating {}", args.out))?;
        write_trace(std::io::BufWriter::new(file), &programs)?;
        eprintln!("wrote {} programs to {}", programs.len(), args.out);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.report)
        .with_context(|| format!("reading {}", args.report.display()))?;
    let report: RunReport = serde_json::from_str(&text)?;
    let mut out = std::io::stdout().lock();
    match args.format.as_str() {
        "routing_csv" => report.write_routing_csv(&mut out)?,
        other => report.export(other, &mut out)?,
    }
    Ok(ExitCode::SUCCESS)
}
