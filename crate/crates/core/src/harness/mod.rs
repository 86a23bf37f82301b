//! Experiment orchestration: configs, runs over loopback or TCP, metrics
//! files, and the verification suites.

pub mod config;
pub mod run;
pub mod transport;
pub mod verify;

use std::net::TcpListener;

pub use config::{Algorithm, ExperimentConfig, TaskSpec, TransportKind};
pub use run::{metrics_csv, run, run_decomfl, MetricsRow, RunOutput, METRICS_HEADER};
pub use transport::{join, Loopback, TcpServer, Transport};

use crate::error::{Error, Result};

/// Serve a decomfl run to `num_clients` TCP clients joining on `listener`.
pub fn serve(cfg: &ExperimentConfig, listener: &TcpListener) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.baseline().is_some() {
        return Err(Error::Config("serve runs decomfl only; baselines run in-process".into()));
    }
    let mut server = TcpServer::accept(listener, cfg)?;
    run_decomfl(cfg, &mut server)
}
