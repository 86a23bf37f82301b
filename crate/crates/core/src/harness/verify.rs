//! Property suites behind `decomfl verify`, and the scenarios they share
//! with the acceptance tests.

use std::fmt;

use crate::error::{Error, Result};
use crate::harness::config::{Algorithm, ExperimentConfig, TaskSpec};
use crate::harness::run::{run, run_decomfl, RunOutput};
use crate::harness::transport::Loopback;
use crate::par::Execution;
use crate::prng::{derive_seed, gaussian_vector, PerturbKey, SeedValue};
use crate::tasks::{random_spd_quadratic, Batch, LossTask, ParamVector};
use crate::zo::{
    mc_estimator_variance, mc_second_moment, mc_smoothed_grad, mc_sphere_moment, proj_scalar, zo_scalar,
};

pub const SUITES: [&str; 5] = ["sync", "equivalence", "zo-stats", "ledger", "sphere-moments"];

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub fn run_suite(name: &str, exec: Execution) -> Result<Vec<Check>> {
    match name {
        "sync" => Ok(vec![sync_check(100, false)?, sync_check(100, true)?]),
        "equivalence" => {
            let mut checks = vec![fedzo_equivalence_check()?];
            checks.extend(variant_checks(100)?);
            Ok(checks)
        }
        "zo-stats" => zo_stats_checks(exec),
        "ledger" => Ok(vec![ledger_parity_check()?, dimension_free_check()?]),
        "sphere-moments" => Ok(vec![sphere_moment_check(exec)?]),
        other => Err(Error::Config(format!("unknown suite {other:?}; expected one of {}", SUITES.join(", ")))),
    }
}

fn least_squares(dim: usize, rows: usize) -> TaskSpec {
    TaskSpec::LeastSquares { dim, rows, clusters: 4, spread: 1.0 }
}

/// A deterministic config with every optional knob at its default.
pub fn base_config(task: TaskSpec, clients: (usize, usize), kp: (usize, usize), rounds: u64, lr: f64) -> ExperimentConfig {
    let text = serde_json::json!({
        "task": task,
        "num_clients": clients.0,
        "clients_per_round": clients.1,
        "local_steps": kp.0,
        "perturbations": kp.1,
        "rounds": rounds,
        "lr": lr,
        "wall_clock": false,
    })
    .to_string();
    ExperimentConfig::from_json(&text).expect("base config is valid")
}

/// Client models after a fully synced run, and the server's model if it was
/// materialized.
pub struct SyncOutcome {
    pub clients: Vec<ParamVector>,
    pub server: Option<ParamVector>,
    pub output: RunOutput,
}

pub fn synced_run(cfg: &ExperimentConfig) -> Result<SyncOutcome> {
    let mut transport = Loopback::from_config(cfg)?;
    let output = run_decomfl(cfg, &mut transport)?;
    let clients = transport.clients().iter().map(|c| c.state.model().clone()).collect();
    let server = output.server.as_ref().and_then(|s| s.model().cloned());
    Ok(SyncOutcome { clients, server, output })
}

/// The randomized schedule `schedule` of the sync property: M=8, m=2, K=2,
/// P=3, 40 rounds. The master seed drives both sampling and perturbations.
pub fn sync_schedule_config(schedule: u64, shift: bool) -> ExperimentConfig {
    let mut cfg = base_config(least_squares(12, 96), (8, 2), (2, 3), 40, 0.2);
    cfg.master_seed = schedule;
    cfg.dataset_seed = schedule ^ 0xDA7A;
    cfg.batch_size = 4;
    if shift {
        cfg.seed_shift = Some(0x5EED_5A17 ^ schedule);
    } else {
        cfg.materialize_server_model = true;
    }
    cfg
}

pub fn sync_check(schedules: u64, shift: bool) -> Result<Check> {
    let mut bad = Vec::new();
    for s in 0..schedules {
        let out = synced_run(&sync_schedule_config(s, shift))?;
        let reference = out.server.as_ref().unwrap_or(&out.clients[0]);
        if !out.clients.iter().all(|c| c.bitwise_eq(reference)) {
            bad.push(s);
        }
    }
    let name = if shift { "sync-shifted-clients-agree" } else { "sync-clients-match-server" };
    Ok(Check::new(name, bad.is_empty(), format!("{schedules} schedules, mismatching: {bad:?}")))
}

pub fn equivalence_config() -> ExperimentConfig {
    let mut cfg = base_config(least_squares(64, 400), (10, 3), (3, 2), 50, 0.5);
    cfg.master_seed = 2024;
    cfg.dataset_seed = 7;
    cfg.batch_size = 8;
    cfg
}

/// Largest relative difference between two loss columns, and whether they
/// are identical bit for bit.
pub fn compare_losses(a: &RunOutput, b: &RunOutput) -> (bool, f64) {
    let mut bitwise = a.metrics.len() == b.metrics.len();
    let mut worst: f64 = 0.0;
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        bitwise &= x.global_loss.to_bits() == y.global_loss.to_bits();
        let scale = x.global_loss.abs().max(y.global_loss.abs());
        if scale > 0.0 {
            worst = worst.max((x.global_loss - y.global_loss).abs() / scale);
        }
    }
    if a.metrics.len() != b.metrics.len() {
        worst = f64::INFINITY;
    }
    (bitwise, worst)
}

pub fn fedzo_equivalence_check() -> Result<Check> {
    let cfg = equivalence_config();
    let mut fedzo = cfg.clone();
    fedzo.algorithm = Algorithm::FedzoCommon;
    let (bitwise, rel) = compare_losses(&run(&cfg)?, &run(&fedzo)?);
    Ok(Check::new(
        "decomfl-equals-common-seed-fedzo",
        bitwise || rel <= 1e-12,
        format!("bitwise: {bitwise}, max relative difference {rel:.3e} (tolerance 1e-12)"),
    ))
}

fn models_equal(a: &SyncOutcome, b: &SyncOutcome) -> bool {
    a.clients.len() == b.clients.len() && a.clients.iter().zip(&b.clients).all(|(x, y)| x.bitwise_eq(y))
}

/// Pairs of runs that must agree bitwise under each variant, over
/// `schedules` randomized schedules.
pub fn variant_checks(schedules: u64) -> Result<Vec<Check>> {
    let mut comp_bad = 0;
    let mut comp_worst: f64 = 0.0;
    let mut momentum_bad = 0;
    let mut prune_bad = 0;
    for s in 0..schedules {
        let snapshot = sync_schedule_config(s, false);

        let mut comp = snapshot.clone();
        comp.compensation_sync = true;
        let (a, b) = (synced_run(&snapshot)?, synced_run(&comp)?);
        if !models_equal(&a, &b) {
            comp_bad += 1;
        }
        for (x, y) in a.clients.iter().zip(&b.clients) {
            comp_worst = comp_worst.max(x.max_rel_diff(y));
        }

        let mut heavy = snapshot.clone();
        heavy.momentum = Some(0.0);
        if !models_equal(&a, &synced_run(&heavy)?) {
            momentum_bad += 1;
        }

        let mut keep = snapshot.clone();
        keep.prune_history = false;
        if !models_equal(&a, &synced_run(&keep)?) {
            prune_bad += 1;
        }
    }
    Ok(vec![
        Check::new(
            "compensation-equals-snapshot",
            comp_bad == 0,
            format!("{comp_bad}/{schedules} schedules differ bitwise; max relative difference {comp_worst:.3e}"),
        ),
        Check::new("momentum-zero-equals-sgd", momentum_bad == 0, format!("{momentum_bad}/{schedules} schedules differ")),
        Check::new("prune-equals-no-prune", prune_bad == 0, format!("{prune_bad}/{schedules} schedules differ")),
    ])
}

/// The tracked-client scenario of the cost table: one client, sampled every
/// round, K=1, P=10, 3000 rounds, 4-byte values.
pub fn ledger_parity_config() -> ExperimentConfig {
    let mut cfg = base_config(least_squares(8, 16), (1, 1), (1, 10), 3000, 0.1);
    cfg.accounting_only = true;
    cfg
}

pub fn ledger_parity_check() -> Result<Check> {
    let out = run(&ledger_parity_config())?;
    let report = out.ledger.report();
    let bytes = report.clients[0].bytes;
    let mut prev = 0;
    let mut uplink_fixed = true;
    for snap in out.ledger.snapshots() {
        uplink_fixed &= snap.totals.up_scalars - prev == 10;
        prev = snap.totals.up_scalars;
    }
    Ok(Check::new(
        "ledger-parity",
        bytes == 360_000 && uplink_fixed,
        format!("tracked client {bytes} bytes (expected 360000), uplink fixed at 10 per round: {uplink_fixed}"),
    ))
}

pub fn dimension_scenario(algorithm: Algorithm, dim: usize) -> ExperimentConfig {
    let mut cfg = base_config(least_squares(dim, 40), (10, 3), (2, 4), 25, 0.1);
    cfg.algorithm = algorithm;
    cfg.accounting_only = true;
    cfg
}

pub fn dimension_free_check() -> Result<Check> {
    let total = |alg, d| -> Result<u64> { Ok(run(&dimension_scenario(alg, d))?.ledger.report().total_bytes) };
    let (z_small, z_large) = (total(Algorithm::Decomfl, 100)?, total(Algorithm::Decomfl, 10_000)?);
    let (f_small, f_large) = (total(Algorithm::Fedavg, 100)?, total(Algorithm::Fedavg, 10_000)?);
    Ok(Check::new(
        "ledger-dimension-free",
        z_small == z_large && f_large == 100 * f_small,
        format!("decomfl {z_small} vs {z_large} bytes; fedavg {f_small} vs {f_large} bytes"),
    ))
}

/// The quadratic probe of the estimator statistics, `d = 16`.
pub fn zo_probe() -> (LossTask, Batch, ParamVector) {
    let d = 16;
    let batch = random_spd_quadratic(d, 0.5, 2.0, 16).expect("valid quadratic");
    let x = gaussian_vector(SeedValue(0x0DDB), d).expect("positive dim");
    (LossTask::quadratic(d), batch, x)
}

pub fn zo_stats_checks(exec: Execution) -> Result<Vec<Check>> {
    let (task, batch, x) = zo_probe();
    let mu = 1e-3;
    let grad = task.grad(&x, &batch)?;

    let est = mc_smoothed_grad(exec, &task, &x, mu, 200_000, SeedValue(1), &batch)?;
    let worst = est
        .mean
        .iter()
        .zip(&est.stderr)
        .zip(grad.as_slice())
        .map(|((m, s), g)| (m - g).abs() / s)
        .fold(0.0f64, f64::max);
    let unbiased = Check::new(
        "zo-unbiased",
        est.within(grad.as_slice(), 5.0),
        format!("max deviation {worst:.2} stderr (limit 5) at 200000 samples"),
    );

    let v1 = mc_estimator_variance(exec, &task, &x, grad.as_slice(), mu, 1, 100_000, SeedValue(2), &batch)?;
    let v4 = mc_estimator_variance(exec, &task, &x, grad.as_slice(), mu, 4, 100_000, SeedValue(3), &batch)?;
    let ratio = v1.mean[0] / v4.mean[0];
    let variance = Check::new(
        "zo-variance-1-over-p",
        (3.2..=4.8).contains(&ratio),
        format!("Var(P=1)/Var(P=4) = {ratio:.3} (range [3.2, 4.8]) at 100000 trials"),
    );

    let lhs = mc_second_moment(exec, &task, &x, mu, 200_000, SeedValue(4), &batch)?;
    let d = x.dim() as f64;
    let lipschitz = 2.0;
    let rhs = 0.5 * mu * mu * lipschitz * lipschitz * (d + 6.0).powi(3) + 2.0 * (d + 4.0) * grad.norm_sq();
    let second = Check::new(
        "zo-second-moment-bound",
        lhs.mean[0] <= rhs + 3.0 * lhs.stderr[0],
        format!("E[g^2 |z|^2] = {:.4} +- {:.4}, bound {rhs:.4}", lhs.mean[0], lhs.stderr[0]),
    );

    Ok(vec![unbiased, variance, second, projection_check()?])
}

/// `|zo_scalar − proj_scalar| = (μ/2)|zᵀAz|` on random quadratic probes.
pub fn projection_check() -> Result<Check> {
    let mut worst: f64 = 0.0;
    for probe in 0..100u64 {
        let d = 4 + (probe % 13) as usize;
        let batch = random_spd_quadratic(d, 0.5, 2.0, 500 + probe)?;
        let task = LossTask::quadratic(d);
        let x = gaussian_vector(derive_seed(PerturbKey::new(SeedValue(10), probe, 0, 0)), d)?;
        let z = gaussian_vector(derive_seed(PerturbKey::new(SeedValue(10), probe, 1, 0)), d)?;
        let mu = 0.01 + 0.09 * (probe as f64 / 99.0);
        let gap = (zo_scalar(&task, &x, &z, mu, &batch)? - proj_scalar(&task, &x, &z, &batch)?).abs();
        let za: f64 = (0..d).map(|i| z.as_slice()[i] * crate::tasks::dot(batch.row(i), z.as_slice())).sum();
        let expected = 0.5 * mu * za.abs();
        worst = worst.max((gap - expected).abs() / expected);
    }
    Ok(Check::new(
        "projection-gap-exact",
        worst <= 1e-9,
        format!("max relative error {worst:.3e} over 100 probes (tolerance 1e-9)"),
    ))
}

/// The uniform-sphere fourth-moment identity at `d = 8` with `u = v`.
pub fn sphere_moment_check(exec: Execution) -> Result<Check> {
    let d = 8;
    let u = gaussian_vector(SeedValue(0x5FE7E), d)?.into_inner();
    let est = mc_sphere_moment(exec, &u, &u, 200_000, SeedValue(77))?;
    let expected = sphere_moment_target(&u, &u);
    let worst = est
        .mean
        .iter()
        .zip(&est.stderr)
        .zip(&expected)
        .map(|((m, s), t)| (m - t).abs() / s)
        .fold(0.0f64, f64::max);
    Ok(Check::new(
        "sphere-fourth-moment",
        est.within(&expected, 5.0),
        format!("max deviation {worst:.2} stderr (limit 5) over {} entries", d * d),
    ))
}

/// `(d/(d+2)) (tr(uvᵀ) I + uvᵀ + vuᵀ)`, row-major. Reduces to the familiar
/// `(d/(d+2)) tr(uvᵀ) I + (2d/(d+2)) uvᵀ` when `u = v`.
pub fn sphere_moment_target(u: &[f64], v: &[f64]) -> Vec<f64> {
    let d = u.len();
    let c = d as f64 / (d as f64 + 2.0);
    let tr = crate::tasks::dot(u, v);
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for l in 0..d {
            let diag = if i == l { tr } else { 0.0 };
            out[i * d + l] = c * (diag + u[i] * v[l] + v[i] * u[l]);
        }
    }
    out
}
