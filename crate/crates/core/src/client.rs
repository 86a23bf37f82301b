//! Client side of the protocol: rebuild from history, local update with
//! revert, and the optional variants (momentum, divergence compensation,
//! gradient projection, private seed shift).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prng::{gaussian_vector, mix64, SeedValue};
use crate::protocol::{Grid, Message, RoundRecord, ScalarGrid, SeedGrid};
use crate::tasks::{LocalData, LossTask, ParamVector};
use crate::zo::{direction_sum, proj_scalar, zo_scalar_from_base, StepRule, ZOConfig};

/// A bijection applied by clients to every received seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SeedShift {
    Identity,
    /// `mix64(seed ^ secret)`; a bijection since both steps are.
    Xor { secret: u64 },
}

impl SeedShift {
    pub fn apply(&self, seed: SeedValue) -> SeedValue {
        match self {
            SeedShift::Identity => seed,
            SeedShift::Xor { secret } => SeedValue(mix64(seed.0 ^ secret)),
        }
    }
}

/// How a client turns a perturbation into a gradient scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Forward difference of two loss evaluations on the same batch.
    #[default]
    ForwardDifference,
    /// `⟨∇f(x; ξ), z⟩`; needs a task with an analytic gradient.
    GradientProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub zo: ZOConfig,
    #[serde(default)]
    pub rule: StepRule,
    #[serde(default)]
    pub estimator: Estimator,
    /// Keep the end-of-update model and correct it once the global scalars
    /// arrive instead of snapshotting and reverting. SGD only.
    #[serde(default)]
    pub compensation: bool,
    /// Longest rebuild a client accepts. Pulling the full model instead is
    /// not supported, so exceeding it is an error.
    #[serde(default)]
    pub max_lag: Option<u64>,
}

impl ClientConfig {
    pub fn new(zo: ZOConfig) -> Self {
        Self { zo, rule: StepRule::Sgd, estimator: Estimator::ForwardDifference, compensation: false, max_lag: None }
    }

    pub fn validate(&self) -> Result<()> {
        self.zo.validate()?;
        self.rule.validate()?;
        if self.compensation && self.rule.has_state() {
            return Err(Error::Capability("divergence compensation is specific to plain SGD".into()));
        }
        Ok(())
    }
}

/// Apply one local step's worth of recorded scalars to `x` (and momentum).
pub(crate) fn replay_step(
    x: &mut ParamVector,
    momentum: Option<&mut ParamVector>,
    rule: StepRule,
    scalars: &[f64],
    seeds: &[SeedValue],
    shift: Option<SeedShift>,
    scale: f64,
) -> Result<()> {
    let dim = x.dim();
    let zs = seeds
        .iter()
        .map(|s| gaussian_vector(shift.map_or(*s, |sh| sh.apply(*s)), dim))
        .collect::<Result<Vec<_>>>()?;
    let delta = direction_sum(scalars, &zs)?;
    rule.apply(x.as_mut_slice(), momentum.map(|m| m.as_mut_slice()), &delta, scale);
    Ok(())
}

/// Own scalars held back in compensation mode until the round's global
/// scalars arrive.
#[derive(Debug, Clone, PartialEq)]
struct PendingSync {
    round: u64,
    own: ScalarGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    id: usize,
    x: ParamVector,
    momentum: Option<ParamVector>,
    last_round: u64,
    shift: Option<SeedShift>,
    pending: Option<PendingSync>,
}

impl ClientState {
    pub fn new(id: usize, x0: ParamVector, rule: StepRule, shift: Option<SeedShift>) -> Self {
        let momentum = rule.has_state().then(|| ParamVector::zeros(x0.dim()));
        Self { id, x: x0, momentum, last_round: 0, shift, pending: None }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn model(&self) -> &ParamVector {
        &self.x
    }

    pub fn momentum(&self) -> Option<&ParamVector> {
        self.momentum.as_ref()
    }

    /// The round this client's model currently corresponds to.
    pub fn last_round(&self) -> u64 {
        self.last_round
    }

    /// The seed actually used to generate a perturbation.
    pub fn apply_seed_shift(&self, seed: SeedValue) -> SeedValue {
        self.shift.map_or(seed, |s| s.apply(seed))
    }

    fn check_shape<T>(grid: &Grid<T>, zo: &ZOConfig) -> Result<()>
    where
        T: Copy,
    {
        if grid.steps() != zo.local_steps || grid.perturbations() != zo.perturbations {
            return Err(Error::Contract(format!(
                "expected {}x{} grid, got {}x{}",
                zo.local_steps,
                zo.perturbations,
                grid.steps(),
                grid.perturbations()
            )));
        }
        Ok(())
    }

    /// Replay `records` (rounds `t_i .. r`) to bring the model to round `r`.
    ///
    /// Returns the number of values consumed, `2·K·P·(r − t_i)`. The state is
    /// untouched when the payload is rejected.
    pub fn rebuild(&mut self, records: &[RoundRecord], cfg: &ClientConfig) -> Result<usize> {
        for (offset, rec) in records.iter().enumerate() {
            let expected = self.last_round + offset as u64;
            if rec.round != expected {
                return Err(Error::HistoryIntegrity(format!(
                    "client {} expected round {expected}, payload has {}",
                    self.id, rec.round
                )));
            }
            Self::check_shape(&rec.seeds, &cfg.zo)?;
            Self::check_shape(&rec.scalars, &cfg.zo)?;
        }
        if let Some(limit) = cfg.max_lag {
            if records.len() as u64 > limit {
                return Err(Error::Capability(format!(
                    "client {} lags {} rounds (limit {limit}); full-model pull is not implemented",
                    self.id,
                    records.len()
                )));
            }
        }
        let mut rest = records;
        if let Some(pending) = self.pending.take() {
            match records.first() {
                Some(first) if first.round == pending.round => {
                    self.sync_compensate(&pending.own, &first.scalars, &first.seeds, cfg)?;
                    rest = &records[1..];
                }
                _ => {
                    self.pending = Some(pending);
                    if records.is_empty() {
                        return Ok(0);
                    }
                    return Err(Error::HistoryIntegrity("compensation record missing".into()));
                }
            }
        }
        let scale = cfg.zo.step_scale();
        for rec in rest {
            for k in 0..rec.seeds.steps() {
                replay_step(
                    &mut self.x,
                    self.momentum.as_mut(),
                    cfg.rule,
                    rec.scalars.step(k),
                    rec.seeds.step(k),
                    self.shift,
                    scale,
                )?;
            }
        }
        self.last_round += records.len() as u64;
        Ok(2 * cfg.zo.scalars_per_round() * records.len())
    }

    /// Run `K` local steps on the perturbations of round `round` and return
    /// the `K × P` scalars. Without compensation the model and optimizer
    /// state are restored afterwards.
    pub fn local_update(
        &mut self,
        task: &LossTask,
        data: &LocalData,
        seeds: &SeedGrid,
        round: u64,
        cfg: &ClientConfig,
    ) -> Result<ScalarGrid> {
        cfg.validate()?;
        Self::check_shape(seeds, &cfg.zo)?;
        if self.last_round != round || self.pending.is_some() {
            return Err(Error::ProtocolOrder(format!(
                "client {} is at round {} (pending sync: {}), asked to update round {round}",
                self.id,
                self.last_round,
                self.pending.is_some()
            )));
        }
        if cfg.estimator == Estimator::GradientProjection && !task.has_gradient() {
            return Err(Error::Capability("gradient projection needs an analytic gradient".into()));
        }
        let snapshot = (!cfg.compensation).then(|| (self.x.clone(), self.momentum.clone()));
        let result = self.run_local_steps(task, data, seeds, round, cfg);
        match (result, snapshot) {
            (Ok(scalars), Some((x, m))) => {
                self.x = x;
                self.momentum = m;
                Ok(scalars)
            }
            (Ok(scalars), None) => {
                self.pending = Some(PendingSync { round, own: scalars.clone() });
                Ok(scalars)
            }
            (Err(e), Some((x, m))) => {
                self.x = x;
                self.momentum = m;
                Err(e)
            }
            (Err(e), None) => Err(e),
        }
    }

    fn run_local_steps(
        &mut self,
        task: &LossTask,
        data: &LocalData,
        seeds: &SeedGrid,
        round: u64,
        cfg: &ClientConfig,
    ) -> Result<ScalarGrid> {
        let dim = self.x.dim();
        let scale = cfg.zo.step_scale();
        let mut scalars = Vec::with_capacity(seeds.len());
        for k in 0..seeds.steps() {
            let batch = data.batch(self.id, round, k as u64)?;
            let zs = seeds
                .step(k)
                .iter()
                .map(|s| gaussian_vector(self.apply_seed_shift(*s), dim))
                .collect::<Result<Vec<_>>>()?;
            let step_scalars = match cfg.estimator {
                Estimator::ForwardDifference => {
                    let base = task.eval(&self.x, &batch)?;
                    zs.iter()
                        .map(|z| zo_scalar_from_base(task, &self.x, base, z, cfg.zo.mu, &batch))
                        .collect::<Result<Vec<_>>>()?
                }
                Estimator::GradientProjection => {
                    zs.iter().map(|z| proj_scalar(task, &self.x, z, &batch)).collect::<Result<Vec<_>>>()?
                }
            };
            let delta = direction_sum(&step_scalars, &zs)?;
            cfg.rule.apply(self.x.as_mut_slice(), self.momentum.as_mut().map(|m| m.as_mut_slice()), &delta, scale);
            scalars.extend(step_scalars);
        }
        Grid::new(seeds.steps(), seeds.perturbations(), scalars)
    }

    /// Correct an un-reverted end-of-update model with the round's global
    /// scalars: `x ← x − (η/P) Σ_{k,p} (g_global − g_own) z`.
    pub fn sync_compensate(
        &mut self,
        own: &ScalarGrid,
        global: &ScalarGrid,
        seeds: &SeedGrid,
        cfg: &ClientConfig,
    ) -> Result<()> {
        if cfg.rule.has_state() {
            return Err(Error::Capability("divergence compensation is specific to plain SGD".into()));
        }
        if !own.same_shape(global) || !own.same_shape(seeds) {
            return Err(Error::Contract("compensation grids differ in shape".into()));
        }
        let dim = self.x.dim();
        let mut delta = vec![0.0; dim];
        for ((s, g_own), g_global) in seeds.values().iter().zip(own.values()).zip(global.values()) {
            let z = gaussian_vector(self.apply_seed_shift(*s), dim)?;
            let weight = g_global - g_own;
            for (d, zi) in delta.iter_mut().zip(z.as_slice()) {
                *d += weight * zi;
            }
        }
        StepRule::Sgd.apply(self.x.as_mut_slice(), None, &delta, cfg.zo.step_scale());
        Ok(())
    }
}

/// A client bundled with its task and data, driven by protocol messages.
#[derive(Debug, Clone)]
pub struct ClientNode {
    pub state: ClientState,
    pub task: LossTask,
    pub data: LocalData,
    pub cfg: ClientConfig,
}

impl ClientNode {
    /// Handle one incoming message, returning the reply if there is one.
    pub fn handle(&mut self, msg: &Message) -> Result<Option<Message>> {
        match msg {
            Message::Rebuild { records } => {
                self.state.rebuild(records, &self.cfg)?;
                Ok(None)
            }
            Message::Request { round, seeds } => {
                let scalars = self.state.local_update(&self.task, &self.data, seeds, *round, &self.cfg)?;
                Ok(Some(Message::Response { client_id: self.state.id() as u64, scalars }))
            }
            other => Err(Error::ProtocolOrder(format!("client cannot handle tag {}", other.tag()))),
        }
    }
}
