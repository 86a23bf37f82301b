//! Server side of the protocol: client sampling, seed issuance, scalar
//! aggregation, history, and the optional materialized model.

use std::collections::VecDeque;

use crate::client::replay_step;
use crate::error::{Error, Result};
use crate::prng::{bounded, derive_seed, stream_u64, PerturbKey, SeedValue};
use crate::protocol::{Grid, RoundRecord, ScalarGrid, SeedGrid};
use crate::tasks::ParamVector;
use crate::zo::{StepRule, ZOConfig};

/// Step index reserved for the sampling stream of a round.
const SAMPLING_STEP: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub zo: ZOConfig,
    pub rule: StepRule,
    pub master: SeedValue,
    /// Keep `x_server` in step with the clients. Needs the initial model and
    /// cannot be combined with a client-side seed shift.
    pub materialize: Option<ParamVector>,
    pub seed_shift: bool,
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        self.zo.validate()?;
        self.rule.validate()?;
        if self.num_clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::Config(format!(
                "clients per round must lie in 1..={}, got {}",
                self.num_clients, self.clients_per_round
            )));
        }
        if self.seed_shift && self.materialize.is_some() {
            return Err(Error::Capability(
                "the server cannot materialize the model when clients shift their seeds".into(),
            ));
        }
        Ok(())
    }
}

/// `m` distinct ids from `0..M` by a partial Fisher–Yates shuffle seeded from
/// `(master, round)`, returned in ascending order.
pub fn sample_clients(master: SeedValue, round: u64, num_clients: usize, count: usize) -> Result<Vec<usize>> {
    if count > num_clients {
        return Err(Error::Config(format!("cannot sample {count} of {num_clients} clients")));
    }
    let seed = derive_seed(PerturbKey::new(master, round, SAMPLING_STEP, 0));
    let mut ids: Vec<usize> = (0..num_clients).collect();
    for j in 0..count {
        let span = (num_clients - j) as u64;
        let pick = j + bounded(stream_u64(seed, j as u64), span) as usize;
        ids.swap(j, pick);
    }
    let mut chosen = ids[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// The `K × P` perturbation seeds of a round.
pub fn round_seeds(master: SeedValue, round: u64, zo: &ZOConfig) -> SeedGrid {
    let (k, p) = (zo.local_steps, zo.perturbations);
    let values = (0..k as u64)
        .flat_map(|kk| (0..p as u64).map(move |pp| derive_seed(PerturbKey::new(master, round, kk, pp))))
        .collect();
    Grid::new(k, p, values).expect("shape matches by construction")
}

/// Participants and seeds of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round: u64,
    pub clients: Vec<usize>,
    pub seeds: SeedGrid,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    cfg: ServerConfig,
    round: u64,
    /// Records `history_base ..` in order.
    history: VecDeque<RoundRecord>,
    history_base: u64,
    last_round: Vec<u64>,
    x_server: Option<ParamVector>,
    momentum: Option<ParamVector>,
}

impl ServerState {
    pub fn new(cfg: ServerConfig) -> Result<Self> {
        cfg.validate()?;
        let x_server = cfg.materialize.clone();
        let momentum = match (&x_server, cfg.rule.has_state()) {
            (Some(x), true) => Some(ParamVector::zeros(x.dim())),
            _ => None,
        };
        let last_round = vec![0; cfg.num_clients];
        Ok(Self { cfg, round: 0, history: VecDeque::new(), history_base: 0, last_round, x_server, momentum })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn model(&self) -> Option<&ParamVector> {
        self.x_server.as_ref()
    }

    pub fn last_round(&self, client: usize) -> u64 {
        self.last_round[client]
    }

    /// Number of records currently retained.
    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn history_base(&self) -> u64 {
        self.history_base
    }

    pub fn begin_round(&self) -> Result<RoundPlan> {
        let clients = sample_clients(self.cfg.master, self.round, self.cfg.num_clients, self.cfg.clients_per_round)?;
        Ok(RoundPlan { round: self.round, clients, seeds: round_seeds(self.cfg.master, self.round, &self.cfg.zo) })
    }

    /// Mean of the sampled clients' scalars, folded in ascending id order.
    /// Any missing, duplicate, foreign or misshapen response aborts the round.
    pub fn aggregate(&self, plan: &RoundPlan, responses: &[(usize, ScalarGrid)]) -> Result<ScalarGrid> {
        let abort = |reason: String| Error::RoundAborted { round: plan.round, reason };
        let mut ordered: Vec<&(usize, ScalarGrid)> = responses.iter().collect();
        ordered.sort_by_key(|(id, _)| *id);
        if ordered.len() != plan.clients.len() {
            return Err(abort(format!("expected {} responses, got {}", plan.clients.len(), ordered.len())));
        }
        for ((id, grid), want) in ordered.iter().zip(&plan.clients) {
            if id != want {
                return Err(abort(format!("missing response from client {want}")));
            }
            if !grid.same_shape(&plan.seeds) {
                return Err(abort(format!("client {id} sent a misshapen response")));
            }
        }
        let mut sum = vec![0.0; plan.seeds.len()];
        for (_, grid) in &ordered {
            for (s, g) in sum.iter_mut().zip(grid.values()) {
                *s += g;
            }
        }
        let m = ordered.len() as f64;
        for s in &mut sum {
            *s /= m;
        }
        Grid::new(plan.seeds.steps(), plan.seeds.perturbations(), sum)
    }

    /// Append the round's record, mark the participants current, and advance.
    pub fn commit_round(&mut self, plan: &RoundPlan, record: RoundRecord) -> Result<()> {
        if record.round != self.round || plan.round != self.round {
            return Err(Error::ProtocolOrder(format!(
                "server is at round {}, commit is for round {}",
                self.round, record.round
            )));
        }
        if let Some(x) = self.x_server.as_mut() {
            let scale = self.cfg.zo.step_scale();
            for k in 0..record.seeds.steps() {
                replay_step(
                    x,
                    self.momentum.as_mut(),
                    self.cfg.rule,
                    record.scalars.step(k),
                    record.seeds.step(k),
                    None,
                    scale,
                )?;
            }
        }
        for &id in &plan.clients {
            self.last_round[id] = self.round;
        }
        self.history.push_back(record);
        self.round += 1;
        Ok(())
    }

    /// Records `since .. round`, for a client whose model is at `since`.
    pub fn records_since(&self, since: u64) -> Result<Vec<RoundRecord>> {
        if since > self.round {
            return Err(Error::HistoryIntegrity(format!("round {since} is in the future")));
        }
        if since < self.history_base {
            return Err(Error::HistoryIntegrity(format!(
                "round {since} was pruned; history starts at {}",
                self.history_base
            )));
        }
        let start = (since - self.history_base) as usize;
        Ok(self.history.range(start..).cloned().collect())
    }

    /// Rebuild payload for a client, from the server's record of its `t_i`.
    pub fn payload_for(&self, client: usize) -> Result<Vec<RoundRecord>> {
        self.records_since(self.last_round[client])
    }

    /// Record that a client has been brought up to the current round outside
    /// a sampled round (the end-of-run sync).
    pub fn mark_current(&mut self, client: usize) {
        self.last_round[client] = self.round;
    }

    /// Drop every record older than the oldest client's `t_i`.
    pub fn prune_history(&mut self) {
        let floor = self.last_round.iter().copied().min().unwrap_or(self.round);
        while self.history_base < floor {
            self.history.pop_front();
            self.history_base += 1;
        }
    }
}
