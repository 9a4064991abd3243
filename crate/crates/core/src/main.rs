use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ccmsim::ccm::Scheduler;
use ccmsim::experiment::{ConfigError, ExecError, ExperimentConfig, Overrides, SfSpec};
use ccmsim::host::{Mechanism, Polling};
use ccmsim::metrics::{self, CsvRow};
use ccmsim::ring::explore::{self, Budget, Machine};

const SEED_ENV: &str = "CCMSIM_SEED";

#[derive(Parser)]
#[command(name = "ccmsim", version, about = "Host / computational-memory offload simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one simulation.
    Run(RunArgs),
    /// Run the cross product of the config's sweep axes.
    Sweep(SweepArgs),
    /// Exhaustively check ring interleavings.
    CheckRings(CheckArgs),
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

#[derive(Args)]
struct Axes {
    #[arg(long)]
    mechanism: Option<Mechanism>,
    /// Polling factor label (p1, p10, ...) or a duration like 500ns.
    #[arg(long)]
    polling: Option<Polling>,
    /// Streaming factor: slots, sfN, or full.
    #[arg(long)]
    sf: Option<SfSpec>,
    #[arg(long)]
    scheduler: Option<Scheduler>,
    #[arg(long, value_parser = parse_on_off)]
    ooo: Option<bool>,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[command(flatten)]
    axes: Axes,
    /// Write the event dispatch trace (one line per event) to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output directory for results.csv and results.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    config: PathBuf,
    #[command(flatten)]
    axes: Axes,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MachineArg {
    Shipped,
    BrokenMetaFirst,
    All,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    machine: MachineArg,
    #[arg(long, default_value_t = Budget::default().capacity)]
    capacity: u64,
    #[arg(long, default_value_t = Budget::default().device_steps)]
    device_steps: u32,
    #[arg(long, default_value_t = Budget::default().host_steps)]
    host_steps: u32,
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got `{s}`")),
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Violations(String),
    #[error("writing {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Exec(e) => e.exit_code() as u8,
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Violations(_) => 3,
            CliError::Output { .. } => 1,
        }
    }
}

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Output {
        path: path.to_path_buf(),
        source,
    }
}

fn seed_from_env() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}: expected an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn overrides(axes: &Axes) -> Result<Overrides, CliError> {
    Ok(Overrides {
        mechanism: axes.mechanism,
        polling: axes.polling,
        sf: axes.sf,
        scheduler: axes.scheduler,
        ooo: axes.ooo,
        seed: seed_from_env()?,
    })
}

fn write_reports(dir: &Path, rows: &[CsvRow]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(output_err(dir))?;
    let csv_path = dir.join("results.csv");
    let f = File::create(&csv_path).map_err(output_err(&csv_path))?;
    metrics::write_csv(BufWriter::new(f), rows).map_err(|e| CliError::Output {
        path: csv_path.clone(),
        source: e.into(),
    })?;
    let json_path = dir.join("results.json");
    let mut text = serde_json::to_string_pretty(&metrics::json_series(rows)).expect("json encode");
    text.push('\n');
    fs::write(&json_path, text).map_err(output_err(&json_path))?;
    Ok(())
}

fn out_dir(cli: Option<&PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    cli.cloned()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Run every planned combination in order. A failure stops the sweep after
/// the rows collected so far have been written.
fn run_plan(
    cfg: &ExperimentConfig,
    ov: &Overrides,
    single: bool,
    trace: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let plan = cfg.plan(ov, single)?;
    let mut rows = Vec::with_capacity(plan.len());
    let mut failure = None;
    for spec in &plan {
        let sink: Option<Box<dyn Write>> = match trace {
            Some(p) => Some(Box::new(BufWriter::new(File::create(p).map_err(output_err(p))?))),
            None => None,
        };
        match ccmsim::experiment::execute(cfg, spec, sink) {
            Ok((row, _)) => rows.push(row),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    metrics::normalize(&mut rows, cfg.metrics.baseline.as_str());
    write_reports(out, &rows)?;
    for r in &rows {
        println!(
            "{:>3} {:<4} {:<16} e2e={}ps T_C={} T_D={} T_H={}",
            r.run_id, r.mechanism, r.workload, r.e2e_ps, r.t_c_ps, r.t_d_ps, r.t_h_ps
        );
    }
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn check_rings(args: &CheckArgs) -> Result<(), CliError> {
    let budget = Budget {
        capacity: args.capacity,
        device_steps: args.device_steps,
        host_steps: args.host_steps,
    };
    budget.check().map_err(|e| CliError::Usage(e.to_string()))?;
    let machines: &[Machine] = match args.machine {
        MachineArg::Shipped => &[Machine::Shipped],
        MachineArg::BrokenMetaFirst => &[Machine::BrokenMetaFirst],
        MachineArg::All => &[Machine::Shipped, Machine::BrokenMetaFirst],
    };
    let mut unexpected = Vec::new();
    for &m in machines {
        let report = explore::explore(m, budget).map_err(|e| CliError::Usage(e.to_string()))?;
        println!(
            "{}: {} states, {} violations (capacity {}, {}+{} steps)",
            m.as_str(),
            report.states,
            report.violations.len(),
            budget.capacity,
            budget.device_steps,
            budget.host_steps
        );
        for v in report.violations.iter().take(5) {
            println!("  {v}");
        }
        let expect_clean = m == Machine::Shipped;
        if expect_clean != report.violations.is_empty() {
            unexpected.push(if expect_clean {
                format!("shipped machine has {} violations", report.violations.len())
            } else {
                "broken-meta-first variant showed no violation".to_string()
            });
        }
    }
    if unexpected.is_empty() {
        Ok(())
    } else {
        Err(CliError::Violations(unexpected.join("; ")))
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Run(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let ov = overrides(&a.axes)?;
            run_plan(&cfg, &ov, true, a.trace.as_deref(), &out_dir(a.out.as_ref(), &cfg))
        }
        Cmd::Sweep(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let ov = overrides(&a.axes)?;
            run_plan(&cfg, &ov, false, None, &out_dir(a.out.as_ref(), &cfg))
        }
        Cmd::CheckRings(a) => check_rings(&a),
        Cmd::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let n = cfg.plan(&Overrides::default(), false);
            match n {
                Ok(plan) => println!("ok: {} run(s) planned", plan.len()),
                // A config without a mechanism is still valid for `run --mechanism`.
                Err(ConfigError::Invalid { ref path, .. }) if path == "host.mechanism" => println!("ok"),
                Err(e) => return Err(e.into()),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
