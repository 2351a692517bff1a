//! The `homogen` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::client::{submit, ClientConfig};
use crate::config::KvFile;
use crate::coordinator::{self, CoordinatorConfig};
use crate::error::{Error, Result};
use crate::matmul::{multiply_reference, seeded_pair};
use crate::provider::{self, ProviderConfig};
use crate::sim::{
    compare_live, paper_replication_scenario, read_measurements, simulate, write_comparisons, write_measurements,
    SimScenario,
};
use crate::transport::{Backoff, Body, Endpoint, Message, Policy, TcpNetwork};

pub const EXIT_OK: u8 = 0;
pub const EXIT_DOMAIN: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "homogen",
    version,
    about = "Proportional load balancing for heterogeneous clusters"
)]
pub struct Cli {
    /// key = value file: coordinator settings, or the scenario for sim commands
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the coordinator until killed
    Coordinator(CoordinatorArgs),
    /// Run a service provider until killed
    Provider(ProviderArgs),
    /// Client operations
    #[command(subcommand)]
    Client(ClientCommand),
    /// Virtual-clock simulator
    #[command(subcommand)]
    Sim(SimCommand),
    /// Print the coordinator's provider table
    Status(StatusArgs),
}

#[derive(Debug, Args)]
pub struct CoordinatorArgs {
    /// Address to listen on
    #[arg(long, default_value = "127.0.0.1:7700")]
    pub listen: Endpoint,
    /// Heartbeat interval announced to providers, seconds
    #[arg(long)]
    pub heartbeat: Option<f64>,
    /// Provider registry snapshot, restored on start
    #[arg(long, value_name = "PATH")]
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProviderArgs {
    #[arg(long)]
    pub id: String,
    #[arg(long, value_name = "HOST:PORT")]
    pub coordinator: Endpoint,
    /// Address for sub-requests and operands; port 0 picks a free port
    #[arg(long, value_name = "HOST:PORT", value_parser = parse_listen)]
    pub listen: Endpoint,
    /// Per-row compute time multiplier (at least 1)
    #[arg(long, default_value_t = 1.0, value_name = "FACTOR")]
    pub slowdown: f64,
    /// Fixed speed in rows per second; skips the benchmark
    #[arg(long, value_name = "VALUE")]
    pub calibration: Option<f64>,
    /// Heartbeat interval, seconds
    #[arg(long, default_value_t = 2.0, value_name = "SECONDS")]
    pub heartbeat: f64,
    /// How long a sub-request waits for its operand, seconds
    #[arg(long, default_value_t = 30.0, value_name = "SECONDS")]
    pub operand_timeout: f64,
}

#[derive(Debug, Subcommand)]
pub enum ClientCommand {
    /// Multiply two seeded random square matrices on the cluster
    Submit(SubmitArgs),
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    #[arg(long, value_name = "HOST:PORT")]
    pub coordinator: Endpoint,
    /// Matrix side length
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub size: u32,
    #[arg(long, default_value = "homogenized")]
    pub policy: Policy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Host to receive partial results on
    #[arg(long, default_value = "127.0.0.1")]
    pub listen_host: String,
    /// Reference machine speed for the speedup columns; measured locally if absent
    #[arg(long)]
    pub standalone_speed: Option<f64>,
    /// Overhead slope for the predicted speedup, seconds per row
    #[arg(long, default_value_t = 0.0)]
    pub overhead_slope: f64,
    /// Print the CSV header before the result line
    #[arg(long)]
    pub header: bool,
    /// Check the result against a local multiplication
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Subcommand)]
pub enum SimCommand {
    /// Per-provider detail for every run of a scenario
    Run(SimArgs),
    /// One summary row per run of a scenario
    Sweep(SimArgs),
    /// Sweep the bundled nine-provider scenario
    ReplicatePaper(OutArgs),
    /// Compare measured speedups with the scenario's prediction
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Scenario file; defaults to --config
    #[arg(long, value_name = "PATH")]
    pub scenario: Option<PathBuf>,
    /// Overrides the scenario seed
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output file; standard output if absent
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Scenario file; the bundled scenario if absent and no --config
    #[arg(long, value_name = "PATH")]
    pub scenario: Option<PathBuf>,
    /// CSV rows in the sweep schema
    #[arg(long, value_name = "PATH")]
    pub reports: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct StatusArgs {
    #[arg(long, value_name = "HOST:PORT")]
    pub coordinator: Endpoint,
}

fn parse_listen(s: &str) -> Result<Endpoint> {
    match s.rsplit_once(':') {
        Some((host, "0")) => Ok(Endpoint::bind_any(host)),
        _ => s.parse(),
    }
}

fn usage_error(e: &Error) -> bool {
    matches!(e, Error::InvalidArgument(_) | Error::Config(_))
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}: {e}", e.code());
            if usage_error(&e) {
                EXIT_USAGE
            } else {
                EXIT_DOMAIN
            }
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Coordinator(args) => run_coordinator(config, args),
        Command::Provider(args) => run_provider(args),
        Command::Client(ClientCommand::Submit(args)) => run_submit(args),
        Command::Sim(cmd) => run_sim(config, cmd),
        Command::Status(args) => run_status(args),
    }
}

fn run_coordinator(config: Option<&Path>, args: CoordinatorArgs) -> Result<()> {
    let mut cfg = match config {
        Some(p) => CoordinatorConfig::from_kv(&KvFile::load(p)?)?,
        None => CoordinatorConfig::default(),
    };
    if let Some(hb) = args.heartbeat {
        let window_tracks = cfg.staleness_window == 3.0 * cfg.heartbeat_interval;
        cfg.heartbeat_interval = hb;
        if window_tracks {
            cfg.staleness_window = 3.0 * hb;
        }
    }
    if args.snapshot.is_some() {
        cfg.snapshot_path = args.snapshot;
    }
    cfg.validate()?;
    let handle = coordinator::spawn(Arc::new(TcpNetwork), &args.listen, cfg)?;
    println!("coordinator listening on {}", handle.endpoint());
    handle.join();
    Ok(())
}

fn run_provider(args: ProviderArgs) -> Result<()> {
    let mut cfg = ProviderConfig::new(args.id, args.coordinator, args.listen);
    cfg.slowdown = args.slowdown;
    cfg.calibration = args.calibration;
    cfg.heartbeat_interval = args.heartbeat;
    cfg.operand_timeout = args.operand_timeout;
    let handle = provider::spawn(Arc::new(TcpNetwork), cfg)?;
    println!(
        "provider {} listening on {} calibration {}",
        handle.id(),
        handle.endpoint(),
        handle.calibration()
    );
    handle.join();
    Ok(())
}

fn run_submit(args: SubmitArgs) -> Result<()> {
    let (a, b) = seeded_pair(args.size as usize, args.seed)?;
    let mut cfg = ClientConfig::new(args.coordinator);
    cfg.listen_host = args.listen_host;
    let (product, report) = submit(Arc::new(TcpNetwork), &cfg, &a, &b, args.policy)?;
    if args.verify && product != multiply_reference(&a, &b)? {
        return Err(Error::JobFailed {
            job_id: report.job_id,
            detail: "result differs from the local reference product".into(),
        });
    }
    let standalone = match args.standalone_speed {
        Some(s) => s,
        None => provider::calibrate(&ProviderConfig::new(
            "client",
            Endpoint::bind_any("127.0.0.1"),
            Endpoint::bind_any("127.0.0.1"),
        ))?
        .get(),
    };
    let row = report.measurement(standalone, args.overhead_slope)?;
    print!("{}", write_measurements(&[row], args.header)?);
    Ok(())
}

fn scenario_from(explicit: Option<&Path>, config: Option<&Path>) -> Result<Option<SimScenario>> {
    explicit.or(config).map(SimScenario::load).transpose()
}

fn emit(out: &OutArgs, text: &str) -> Result<()> {
    match &out.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("writing standard output", e))
        }
    }
}

fn run_sim(config: Option<&Path>, cmd: SimCommand) -> Result<()> {
    let needs = |args: &SimArgs| -> Result<SimScenario> {
        let mut s = scenario_from(args.scenario.as_deref(), config)?
            .ok_or_else(|| Error::InvalidArgument("a scenario is required (--scenario or --config)".into()))?;
        if let Some(seed) = args.seed {
            s.seed = seed;
        }
        Ok(s)
    };
    match cmd {
        SimCommand::Run(args) => emit(&args.out, &simulate(&needs(&args)?)?.to_detail_csv()?),
        SimCommand::Sweep(args) => emit(&args.out, &simulate(&needs(&args)?)?.to_csv()?),
        SimCommand::ReplicatePaper(out) => emit(&out, &simulate(&paper_replication_scenario())?.to_csv()?),
        SimCommand::Compare(args) => {
            let scenario = scenario_from(args.scenario.as_deref(), config)?.unwrap_or_else(paper_replication_scenario);
            let file = std::fs::File::open(&args.reports)
                .map_err(|e| Error::io(format!("opening {}", args.reports.display()), e))?;
            let rows = compare_live(&read_measurements(file)?, &scenario)?;
            emit(&args.out, &write_comparisons(&rows)?)
        }
    }
}

fn run_status(args: StatusArgs) -> Result<()> {
    let backoff = Backoff {
        max_attempts: 1,
        ..Backoff::default()
    };
    let mut conn = backoff.connect(&TcpNetwork, &args.coordinator)?;
    conn.send(&Message::new(0, "status", Body::StatusQuery))?;
    let providers = loop {
        let msg = conn.receive()?;
        match msg.body {
            Body::StatusReport { providers } => break providers,
            Body::Error { code, detail } => {
                return Err(Error::JobFailed {
                    job_id: 0,
                    detail: format!("{code}: {detail}"),
                })
            }
            _ => continue,
        }
    };
    let opt = |v: Option<f64>, digits: usize| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.digits$}"));
    println!(
        "{:<16} {:<22} {:>14} {:>10} {:>10} {:<6} services",
        "id", "endpoint", "performance", "age_s", "rtt_ms", "fresh"
    );
    for p in providers {
        println!(
            "{:<16} {:<22} {:>14} {:>10} {:>10} {:<6} {}",
            p.provider.as_str(),
            p.endpoint.to_string(),
            opt(p.performance, 3),
            opt(p.last_seen_age, 1),
            opt(p.round_trip.map(|s| s * 1e3), 2),
            p.fresh,
            p.services.join(",")
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_tree_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(
            run(["homogen", "client", "submit", "--coordinator", "h:1", "--size", "0"]),
            EXIT_USAGE
        );
        assert_eq!(run(["homogen", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["homogen", "sim", "sweep", "--unknown-flag"]), EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["homogen", "--help"]), EXIT_OK);
        assert_eq!(run(["homogen", "sim", "--help"]), EXIT_OK);
    }

    #[test]
    fn listen_accepts_port_zero() {
        assert_eq!(parse_listen("127.0.0.1:0").unwrap().port, 0);
        assert_eq!(parse_listen("127.0.0.1:9").unwrap().port, 9);
        assert!(parse_listen("nope").is_err());
    }
}
