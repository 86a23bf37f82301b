use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};

use crate::baselines::{compressed_fedavg_round, fedzo_round, quantize_dequantize_q8, topk, BaselineKind, Participant, SeedMode};
use crate::client::ClientState;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::transport::{Job, Loopback, Transport};
use crate::ledger::{CommLedger, Direction};
use crate::par::{map_indices, Execution};
use crate::protocol::{Grid, Message, RoundRecord};
use crate::server::{sample_clients, ServerState};
use crate::tasks::{Batch, LocalData, LossTask, ParamVector};

pub const METRICS_HEADER: &str = "round,global_loss,grad_norm,up_scalars_cum,down_scalars_cum,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Rounds completed.
    pub round: u64,
    pub global_loss: f64,
    pub grad_norm: Option<f64>,
    pub up_scalars_cum: u64,
    pub down_scalars_cum: u64,
    pub wall_ms: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let grad = r.grad_norm.map(|g| g.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            r.round, r.global_loss, grad, r.up_scalars_cum, r.down_scalars_cum, r.wall_ms
        );
    }
    out
}

/// Full-population objective `(1/M) Σ_i f_i(x)` over every client's shard.
/// Evaluated by the harness; never charged to the ledger.
pub struct Evaluator {
    exec: Execution,
    task: LossTask,
    batches: Vec<Batch>,
}

impl Evaluator {
    pub fn new(exec: Execution, task: LossTask, data: &[LocalData]) -> Result<Self> {
        let batches = data.iter().map(|d| d.full_batch()).collect::<Result<Vec<_>>>()?;
        Ok(Self { exec, task, batches })
    }

    pub fn loss(&self, x: &ParamVector) -> Result<f64> {
        let parts = map_indices(self.exec, self.batches.len(), |i| self.task.eval(x, &self.batches[i]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.iter().sum::<f64>() / parts.len() as f64)
    }

    /// `‖(1/M) Σ_i ∇f_i(x)‖`, when the task has a gradient.
    pub fn grad_norm(&self, x: &ParamVector) -> Result<Option<f64>> {
        if !self.task.has_gradient() {
            return Ok(None);
        }
        let grads = map_indices(self.exec, self.batches.len(), |i| self.task.grad(x, &self.batches[i]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut sum = vec![0.0; x.dim()];
        for g in &grads {
            for (s, v) in sum.iter_mut().zip(g.as_slice()) {
                *s += v;
            }
        }
        let n = grads.len() as f64;
        Ok(Some(sum.iter().map(|s| (s / n) * (s / n)).sum::<f64>().sqrt()))
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRow>,
    pub ledger: CommLedger,
    /// Global model after the last round (the initial model in
    /// accounting-only runs).
    pub final_model: ParamVector,
    /// Server state of a decomfl run.
    pub server: Option<ServerState>,
}

impl RunOutput {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let report = self.ledger.report();
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        std::fs::write(dir.join("ledger.json"), report.to_json())?;
        std::fs::write(dir.join("ledger.csv"), report.to_csv())?;
        Ok(())
    }
}

struct Recorder {
    start: Instant,
    wall_clock: bool,
    eval_every: u64,
    rounds: u64,
    rows: Vec<MetricsRow>,
}

impl Recorder {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            start: Instant::now(),
            wall_clock: cfg.wall_clock,
            eval_every: cfg.eval_every,
            rounds: cfg.rounds,
            rows: Vec::new(),
        }
    }

    fn due(&self, completed: u64) -> bool {
        completed % self.eval_every == 0 || completed == self.rounds
    }

    fn record(&mut self, completed: u64, loss: f64, grad_norm: Option<f64>, ledger: &CommLedger) {
        let t = ledger.totals();
        let wall_ms = if self.wall_clock { self.start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        self.rows.push(MetricsRow {
            round: completed,
            global_loss: loss,
            grad_norm,
            up_scalars_cum: t.up_values(),
            down_scalars_cum: t.down_values(),
            wall_ms,
        });
    }
}

/// Run an experiment with in-process clients.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.baseline().is_some() {
        return run_baseline(cfg);
    }
    let mut transport = Loopback::from_config(cfg)?;
    run_decomfl(cfg, &mut transport)
}

/// Run the protocol over an arbitrary transport.
pub fn run_decomfl(cfg: &ExperimentConfig, transport: &mut dyn Transport) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.baseline().is_some() {
        return Err(Error::Config("only decomfl runs over a transport".into()));
    }
    let task = cfg.task()?;
    let data = cfg.local_data()?;
    let evaluator = Evaluator::new(cfg.execution(), task, &data)?;
    let mut server = ServerState::new(cfg.server_config()?)?;
    let mut ledger = CommLedger::new(cfg.num_clients, cfg.report_width)?;
    let mut observer_cfg = cfg.client_config();
    observer_cfg.compensation = false;
    observer_cfg.max_lag = None;
    let mut observer = ClientState::new(usize::MAX, cfg.initial_model()?, cfg.rule(), cfg.shift());
    let mut recorder = Recorder::new(cfg);

    for r in 0..cfg.rounds {
        let plan = server.begin_round()?;
        let mut jobs: Vec<Job> = Vec::with_capacity(plan.clients.len());
        for &id in &plan.clients {
            let rebuild = Message::Rebuild { records: server.payload_for(id)? };
            let request = Message::Request { round: r, seeds: plan.seeds.clone() };
            ledger.charge_message(id, &rebuild);
            ledger.charge_message(id, &request);
            jobs.push((id, vec![rebuild, request]));
        }
        let replies = if cfg.accounting_only {
            jobs.iter()
                .map(|(id, _)| {
                    let scalars = Grid::filled(cfg.local_steps, cfg.perturbations, 0.0);
                    (*id, vec![Message::Response { client_id: *id as u64, scalars }])
                })
                .collect()
        } else {
            transport.exchange(jobs)?
        };
        let mut responses = Vec::with_capacity(replies.len());
        for (id, msgs) in replies {
            for msg in msgs {
                ledger.charge_message(id, &msg);
                match msg {
                    Message::Response { client_id, scalars } if client_id as usize == id => responses.push((id, scalars)),
                    other => {
                        return Err(Error::ProtocolOrder(format!(
                            "unexpected reply with tag {} from client {id}",
                            other.tag()
                        )))
                    }
                }
            }
        }
        let global = server.aggregate(&plan, &responses)?;
        let record = RoundRecord::new(r, plan.seeds.clone(), global)?;
        server.commit_round(&plan, record.clone())?;
        if cfg.prune_history {
            server.prune_history();
        }
        ledger.end_round(r);
        if !cfg.accounting_only {
            observer.rebuild(std::slice::from_ref(&record), &observer_cfg)?;
        }
        if recorder.due(r + 1) {
            let (loss, grad) = if cfg.accounting_only {
                (f64::NAN, None)
            } else {
                (evaluator.loss(observer.model())?, evaluator.grad_norm(observer.model())?)
            };
            debug!("round {} loss {loss}", r + 1);
            recorder.record(r + 1, loss, grad, &ledger);
        }
    }

    if cfg.final_sync && cfg.rounds > 0 {
        let mut jobs = Vec::new();
        for id in 0..cfg.num_clients {
            if server.last_round(id) < server.round() {
                let rebuild = Message::Rebuild { records: server.payload_for(id)? };
                ledger.charge_message(id, &rebuild);
                jobs.push((id, vec![rebuild]));
                server.mark_current(id);
            }
        }
        if !cfg.accounting_only {
            transport.exchange(jobs)?;
        }
        if cfg.prune_history {
            server.prune_history();
        }
    }
    transport.shutdown()?;
    info!("decomfl finished {} rounds", cfg.rounds);
    Ok(RunOutput {
        metrics: recorder.rows,
        ledger,
        final_model: observer.model().clone(),
        server: Some(server),
    })
}

fn run_baseline(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let kind = cfg.baseline().expect("baseline config");
    let task = cfg.task()?;
    let data = cfg.local_data()?;
    let exec = cfg.execution();
    let evaluator = Evaluator::new(exec, task, &data)?;
    let mut ledger = CommLedger::new(cfg.num_clients, cfg.report_width)?;
    let mut recorder = Recorder::new(cfg);
    let mut x = cfg.initial_model()?;
    let zo = cfg.zo();
    let (down, up) = kind.per_client_charges(task.dim());

    for r in 0..cfg.rounds {
        let sampled = sample_clients(cfg.master(), r, cfg.num_clients, cfg.clients_per_round)?;
        for &id in &sampled {
            ledger.charge(Direction::Down, id, down);
            ledger.charge(Direction::Up, id, up);
        }
        if !cfg.accounting_only {
            let who: Vec<Participant<'_>> =
                sampled.iter().map(|&id| Participant { id, task: &task, data: &data[id] }).collect();
            x = match kind {
                BaselineKind::FedzoCommon => fedzo_round(exec, &x, &who, cfg.master(), r, &zo, SeedMode::Common)?,
                BaselineKind::FedzoIndependent => {
                    fedzo_round(exec, &x, &who, cfg.master(), r, &zo, SeedMode::Independent)?
                }
                BaselineKind::Fedavg => compressed_fedavg_round(exec, &x, &who, r, cfg.lr, cfg.local_steps, Ok)?,
                BaselineKind::FedavgTopk { k } => {
                    compressed_fedavg_round(exec, &x, &who, r, cfg.lr, cfg.local_steps, |d| topk(&d, k))?
                }
                BaselineKind::FedcomQ8 => compressed_fedavg_round(exec, &x, &who, r, cfg.lr, cfg.local_steps, |d| {
                    Ok(quantize_dequantize_q8(&d))
                })?,
            };
        }
        ledger.end_round(r);
        if recorder.due(r + 1) {
            let (loss, grad) =
                if cfg.accounting_only { (f64::NAN, None) } else { (evaluator.loss(&x)?, evaluator.grad_norm(&x)?) };
            recorder.record(r + 1, loss, grad, &ledger);
        }
    }
    info!("{:?} finished {} rounds", kind, cfg.rounds);
    Ok(RunOutput { metrics: recorder.rows, ledger, final_model: x, server: None })
}
