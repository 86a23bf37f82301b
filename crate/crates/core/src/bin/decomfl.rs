use std::net::TcpListener;
use std::path::PathBuf;
use std::process::{Child, Command, ExitCode};

use clap::{Parser, Subcommand};
use log::error;

use decomfl::harness::verify::run_suite;
use decomfl::harness::{self, ExperimentConfig, TransportKind};
use decomfl::{Error, Execution, Result};

#[derive(Parser)]
#[command(name = "decomfl", version, about = "Dimension-free federated zeroth-order optimization")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment and write metrics.csv, ledger.json and ledger.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a property suite: sync, equivalence, zo-stats, ledger, sphere-moments.
    Verify {
        suite: String,
        #[arg(long)]
        sequential: bool,
    },
    /// Serve a run to TCP clients.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Join a served run as client `id`.
    Join {
        #[arg(long)]
        addr: String,
        #[arg(long)]
        id: usize,
    },
}

fn spawn_clients(addr: &str, count: usize) -> Result<Vec<Child>> {
    let exe = std::env::current_exe()?;
    (0..count)
        .map(|id| {
            Command::new(&exe)
                .args(["join", "--addr", addr, "--id", &id.to_string()])
                .spawn()
                .map_err(Error::from)
        })
        .collect()
}

fn run_tcp(cfg: &ExperimentConfig, listener: &TcpListener) -> Result<harness::RunOutput> {
    let addr = listener.local_addr()?.to_string();
    let mut children = spawn_clients(&addr, cfg.num_clients)?;
    let result = harness::serve(cfg, listener);
    for child in &mut children {
        if result.is_err() {
            let _ = child.kill();
        }
        let _ = child.wait();
    }
    result
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Run { config, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let output = match cfg.transport {
                TransportKind::Loopback => harness::run(&cfg)?,
                TransportKind::Tcp => run_tcp(&cfg, &TcpListener::bind("127.0.0.1:0")?)?,
            };
            output.write(&out)
        }
        Cmd::Verify { suite, sequential } => {
            let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
            let checks = run_suite(&suite, exec)?;
            for c in &checks {
                println!("{c}");
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(Error::Contract(format!("suite {suite} failed")))
            }
        }
        Cmd::Serve { config, port, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let listener = TcpListener::bind(("127.0.0.1", port))?;
            println!("listening on {}", listener.local_addr()?);
            harness::serve(&cfg, &listener)?.write(&out)
        }
        Cmd::Join { addr, id } => harness::join(addr.as_str(), id),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DECOMFL_LOG", "warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
