//! `splitwire` command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use splitwire::metrics::report::{read_csv, Party, Report, ReportFormat};
use splitwire::model::CutSpec;
use splitwire::orchestrator::compare::Comparison;
use splitwire::orchestrator::verify::{reference_config, run_suite, Suite};
use splitwire::orchestrator::{run_client, run_experiment, serve, ExperimentConfig, RunError};
use splitwire::protocol::Mode;

const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "splitwire", version, about = "Split-learning experiments with coupled and decoupled backpropagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Experiment config (TOML). Defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// csl, dsl, hybrid:LAMBDA or hybrid:LAMBDA:AUX_WEIGHT
    #[arg(long)]
    mode: Option<Mode>,
    /// s, m, d or a block index
    #[arg(long)]
    cut: Option<CutSpec>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<ReportFormat>,
}

impl Overrides {
    fn base(&self, fallback: impl FnOnce() -> ExperimentConfig) -> Result<ExperimentConfig, RunError> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(fallback()),
        }
    }

    fn apply(&self, mut c: ExperimentConfig) -> Result<ExperimentConfig, RunError> {
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(cut) = self.cut {
            c.cut = cut;
        }
        if let Some(n) = self.clients {
            c.clients = n;
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.output.dir = Some(o.clone());
        }
        if let Some(f) = self.format {
            c.output.format = f;
        }
        c.validate()?;
        Ok(c)
    }

    fn load(&self) -> Result<ExperimentConfig, RunError> {
        self.apply(self.base(ExperimentConfig::default)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment in this process.
    Train(Overrides),
    /// Run several variants of one config and tabulate them.
    Compare {
        #[command(flatten)]
        overrides: Overrides,
        /// Each variant is a config path or KEY=VALUE[,KEY=VALUE] applied to
        /// the base config (keys: mode, cut, clients, epochs, window).
        #[arg(required = true)]
        variants: Vec<String>,
    },
    /// Run a verification suite: grad, split-equiv, decoupling, bytes,
    /// lambda, or all.
    Verify {
        suite: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Host the server half over TCP.
    Serve {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
    },
    /// Run the client half against a remote server.
    Client {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "127.0.0.1:7070")]
        connect: String,
    },
    /// Summarize a report file (JSON or CSV).
    InspectReport { path: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPLITWIRE_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            if let Some(report) = e.partial_report() {
                if let Err(w) = emit(report, None, "report") {
                    error!("{w}");
                }
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, RunError> {
    match command {
        Command::Train(o) => {
            let config = o.load()?;
            let result = run_experiment(&config);
            let report = match &result {
                Ok(a) => &a.report,
                Err(e) => match e.partial_report() {
                    Some(r) => r,
                    None => return result.map(|_| ExitCode::SUCCESS),
                },
            };
            emit(report, Some(&config), "report")?;
            result.map(|_| ExitCode::SUCCESS).map_err(strip_report)
        }
        Command::Compare { overrides, variants } => {
            let base = overrides.load()?;
            let mut configs = Vec::new();
            for v in &variants {
                configs.push(variant(&base, &overrides, v)?);
            }
            let table = splitwire::orchestrator::compare::compare(variants, &configs)?;
            write_comparison(&table, &base)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { suite, overrides } => {
            let suites: Vec<Suite> = if suite == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![suite.parse().map_err(RunError::Config)?]
            };
            let config = overrides.apply(overrides.base(reference_config)?)?;
            let mut ok = true;
            for s in suites {
                let report = run_suite(s, &config)?;
                for c in &report.checks {
                    println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
                ok &= report.passed();
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_VERIFY) })
        }
        Command::Serve { overrides, listen } => {
            let config = overrides.load()?;
            let result = serve(&config, &listen, |addr| {
                println!("listening on {addr}");
                let _ = std::io::stdout().flush();
            });
            finish_remote(result, &config, "server")
        }
        Command::Client { overrides, connect } => {
            let config = overrides.load()?;
            let result = run_client(&config, &connect);
            finish_remote(result, &config, "client")
        }
        Command::InspectReport { path } => {
            inspect(&path)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// The caller already wrote the partial report.
fn strip_report(e: RunError) -> RunError {
    match e {
        RunError::Incomplete { source, .. } => *source,
        other => other,
    }
}

fn finish_remote(result: Result<Report, RunError>, config: &ExperimentConfig, name: &str) -> Result<ExitCode, RunError> {
    match result {
        Ok(report) => {
            emit(&report, Some(config), name)?;
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            if let Some(r) = e.partial_report() {
                emit(r, Some(config), name)?;
            }
            Err(strip_report(e))
        }
    }
}

fn variant(base: &ExperimentConfig, overrides: &Overrides, spec: &str) -> Result<ExperimentConfig, RunError> {
    if !spec.contains('=') {
        return overrides.apply(ExperimentConfig::load(Path::new(spec))?);
    }
    let mut c = base.clone();
    for kv in spec.split(',') {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| RunError::Config(format!("variant term '{kv}' is not KEY=VALUE")))?;
        let bad = |e: String| RunError::Config(format!("{k}={v}: {e}"));
        match k.trim() {
            "mode" => c.mode = v.parse().map_err(bad)?,
            "cut" => c.cut = v.parse().map_err(|e: splitwire::model::ModelError| bad(e.to_string()))?,
            "clients" => c.clients = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "epochs" => c.epochs = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "window" => c.window = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            other => return Err(RunError::Config(format!("unknown variant key '{other}'"))),
        }
    }
    c.validate()?;
    Ok(c)
}

/// Writes `report` under the configured output dir, or prints it to stdout.
fn emit(report: &Report, config: Option<&ExperimentConfig>, stem: &str) -> Result<(), RunError> {
    let format = config.map(|c| c.output.format).unwrap_or_default();
    match config.and_then(|c| c.output.dir.as_ref()) {
        Some(dir) => {
            let path = dir.join(format!("{stem}.{}", format.extension()));
            report.write(&path, format)?;
            info!("report written to {}", path.display());
            eprintln!("report: {}", path.display());
        }
        None => match format {
            ReportFormat::Csv => print!("{}", report.to_csv()),
            ReportFormat::Json => println!("{}", report.to_json()),
        },
    }
    Ok(())
}

fn write_comparison(table: &Comparison, config: &ExperimentConfig) -> Result<(), RunError> {
    let format = config.output.format;
    let text = match format {
        ReportFormat::Csv => table.to_csv(),
        ReportFormat::Json => table.to_json(),
    };
    match &config.output.dir {
        Some(dir) => {
            let path = dir.join(format!("comparison.{}", format.extension()));
            std::fs::create_dir_all(dir)
                .and_then(|_| std::fs::write(&path, text))
                .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
            eprintln!("comparison: {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<(), RunError> {
    if path.extension().is_some_and(|e| e == "csv") {
        let rows = read_csv(path)?;
        println!("{} rows", rows.len());
        for row in rows {
            let line: Vec<String> = row.into_iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("{}", line.join(" "));
        }
        return Ok(());
    }
    let r = Report::read_json(path)?;
    println!("schema {}  config sha256 {}", r.schema_version, r.config_sha256);
    println!("complete: {}", r.complete);
    if let Some(f) = &r.failure {
        println!("failure: {f}");
    }
    for party in [Party::Client, Party::Server] {
        for row in r.rows_for(party) {
            println!(
                "epoch {:>3} {:<6} acc {:>8} fwd {:>10} bwd {:>10} peak {:>10} t_fwd {:.1} t_bwd {:.1} t_comm {:.1}",
                row.epoch,
                row.party,
                row.acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
                row.fwd_bytes,
                row.bwd_bytes,
                row.peak_mem_bytes,
                row.t_fwd_ms,
                row.t_bwd_ms,
                row.t_comm_ms
            );
        }
    }
    if let Some(h) = &r.client_params_sha256 {
        println!("client params sha256 {h}");
    }
    if let Some(h) = &r.server_params_sha256 {
        println!("server params sha256 {h}");
    }
    Ok(())
}
