//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion, straight to stdout so the line survives output capture.
//!
//! Tests hold a shared lock so runtime limits are measured without the
//! other criteria competing for cores.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use decomfl::harness::verify::{
    base_config, equivalence_config, ledger_parity_config, sync_schedule_config, synced_run, zo_probe,
};
use decomfl::harness::{run, Algorithm, ExperimentConfig, RunOutput, TaskSpec};
use decomfl::prng::{derive_seed, gaussian_vector, PerturbKey};
use decomfl::tasks::{random_spd_quadratic, LossTask};
use decomfl::zo::{mc_estimator_variance, mc_second_moment, mc_smoothed_grad, mc_sphere_moment, proj_scalar, zo_scalar};
use decomfl::{Execution, ParamVector, SeedValue};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: &str, passed: bool, detail: &str) {
    let line = format!("[{}] {criterion}: {detail}\n", if passed { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn least_squares(dim: usize, rows: usize) -> TaskSpec {
    TaskSpec::LeastSquares { dim, rows, clusters: 4, spread: 1.0 }
}

fn max_rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

#[test]
fn protocol_equivalence() {
    let _g = serial();
    let t = Instant::now();
    let cfg = equivalence_config();
    let mut fedzo = cfg.clone();
    fedzo.algorithm = Algorithm::FedzoCommon;
    let a = run(&cfg).unwrap();
    let b = run(&fedzo).unwrap();
    let elapsed = t.elapsed();
    assert_eq!(a.metrics.len(), 50);
    assert_eq!(b.metrics.len(), 50);
    let bitwise = a.metrics.iter().zip(&b.metrics).all(|(x, y)| x.global_loss.to_bits() == y.global_loss.to_bits());
    let rel = a.metrics.iter().zip(&b.metrics).map(|(x, y)| max_rel(x.global_loss, y.global_loss)).fold(0.0, f64::max);
    let passed = (bitwise || rel <= 1e-12) && within(elapsed, 1.0);
    report(
        "protocol-equivalence",
        passed,
        &format!(
            "50 rounds, loss trajectories bitwise={bitwise}, max relative difference {rel:.3e} (fallback tolerance 1e-12), {:.3}s (< 1s)",
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn model_sync_invariant() {
    let _g = serial();
    let t = Instant::now();
    let mut server_mismatch = 0;
    let mut shifted_mismatch = 0;
    for schedule in 0..100 {
        let out = synced_run(&sync_schedule_config(schedule, false)).unwrap();
        let server = out.server.expect("materialized");
        assert_eq!(out.clients.len(), 8);
        if !out.clients.iter().all(|c| c.bitwise_eq(&server)) {
            server_mismatch += 1;
        }
        let shifted = synced_run(&sync_schedule_config(schedule, true)).unwrap();
        assert!(shifted.server.is_none());
        let first = &shifted.clients[0];
        // Shifting must matter: the shifted run differs from the plain one.
        assert!(!first.bitwise_eq(&server));
        if !shifted.clients.iter().all(|c| c.bitwise_eq(first)) {
            shifted_mismatch += 1;
        }
    }
    let elapsed = t.elapsed();
    let passed = server_mismatch == 0 && shifted_mismatch == 0 && within(elapsed, 10.0);
    report(
        "model-sync",
        passed,
        &format!(
            "100 schedules: client/server mismatches {server_mismatch}, shifted client/client mismatches {shifted_mismatch}, {:.3}s (< 10s)",
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn ledger_parity() {
    let _g = serial();
    let t = Instant::now();
    let cfg = ledger_parity_config();
    assert_eq!((cfg.rounds, cfg.local_steps, cfg.perturbations, cfg.report_width), (3000, 1, 10, 4));
    let out = run(&cfg).unwrap();
    let elapsed = t.elapsed();
    let tracked = &out.ledger.report().clients[0];
    // Independent count: each round the client uploads K·P scalars and later
    // receives that round's K·P seeds and K·P averaged scalars.
    let expected_values = 3 * 3000 * 10;
    let mut per_round_ok = true;
    let mut prev = 0;
    for snap in out.ledger.snapshots() {
        per_round_ok &= snap.totals.up_scalars - prev == 10;
        prev = snap.totals.up_scalars;
    }
    let passed = tracked.total_values == expected_values
        && tracked.bytes == 360_000
        && per_round_ok
        && within(elapsed, 1.0);
    report(
        "ledger-parity",
        passed,
        &format!(
            "tracked client {} values, {} bytes (expected 360000 = 0.36 MB), uplink 10 scalars every round: {per_round_ok}, {:.3}s (< 1s)",
            tracked.total_values,
            tracked.bytes,
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

fn accounting_run(algorithm: Algorithm, dim: usize) -> RunOutput {
    let mut cfg = base_config(least_squares(dim, 40), (10, 3), (2, 4), 25, 0.1);
    cfg.algorithm = algorithm;
    cfg.accounting_only = true;
    run(&cfg).unwrap()
}

#[test]
fn dimension_freeness() {
    let _g = serial();
    let z100 = accounting_run(Algorithm::Decomfl, 100).ledger.report();
    let z10k = accounting_run(Algorithm::Decomfl, 10_000).ledger.report();
    let f100 = accounting_run(Algorithm::Fedavg, 100).ledger.report();
    let f10k = accounting_run(Algorithm::Fedavg, 10_000).ledger.report();
    let same = z100.totals == z10k.totals && z100.total_bytes == z10k.total_bytes;
    let scaled = f10k.total_values == 100 * f100.total_values && f10k.total_bytes == 100 * f100.total_bytes;
    // FedAvg moves 2d values per sampled client per round.
    let fedavg_formula = f100.total_values == 2 * 100 * 3 * 25;
    let passed = same && scaled && fedavg_formula;
    report(
        "dimension-freeness",
        passed,
        &format!(
            "decomfl bytes d=100: {}, d=10000: {}; fedavg bytes d=100: {}, d=10000: {} (ratio {})",
            z100.total_bytes,
            z10k.total_bytes,
            f100.total_bytes,
            f10k.total_bytes,
            f10k.total_bytes as f64 / f100.total_bytes as f64
        ),
    );
    assert!(passed);
}

#[test]
fn zo_statistics() {
    let _g = serial();
    let t = Instant::now();
    let exec = Execution::Parallel;
    let (task, batch, x) = zo_probe();
    assert_eq!(x.dim(), 16);
    let mu = 1e-3;
    // Ax + b by hand from the batch rows.
    let grad: Vec<f64> = (0..16)
        .map(|i| batch.row(i).iter().zip(x.as_slice()).map(|(a, v)| a * v).sum::<f64>() + batch.label(i))
        .collect();

    let est = mc_smoothed_grad(exec, &task, &x, mu, 200_000, SeedValue(101), &batch).unwrap();
    let z_max = est
        .mean
        .iter()
        .zip(&est.stderr)
        .zip(&grad)
        .map(|((m, s), g)| (m - g).abs() / s)
        .fold(0.0, f64::max);
    let unbiased = z_max <= 5.0;

    let v1 = mc_estimator_variance(exec, &task, &x, &grad, mu, 1, 100_000, SeedValue(102), &batch).unwrap();
    let v4 = mc_estimator_variance(exec, &task, &x, &grad, mu, 4, 100_000, SeedValue(103), &batch).unwrap();
    let ratio = v1.mean[0] / v4.mean[0];
    let variance = (3.2..=4.8).contains(&ratio);

    // L is the largest eigenvalue of A, which the probe fixes at 2.
    let second = mc_second_moment(exec, &task, &x, mu, 200_000, SeedValue(104), &batch).unwrap();
    let d = 16.0;
    let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
    let bound = 0.5 * mu * mu * 4.0 * (d + 6.0f64).powi(3) + 2.0 * (d + 4.0) * grad_sq;
    let second_ok = second.mean[0] <= bound + 3.0 * second.stderr[0];

    let elapsed = t.elapsed();
    let passed = unbiased && variance && second_ok && within(elapsed, 30.0);
    report(
        "zo-statistics",
        passed,
        &format!(
            "E[g z] max deviation {z_max:.2} stderr (<= 5); Var(P=1)/Var(P=4) = {ratio:.3} (in [3.2, 4.8]); second moment {:.3} +- {:.3} <= {bound:.3}; {:.2}s (< 30s)",
            second.mean[0],
            second.stderr[0],
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn sphere_moment_identity() {
    let _g = serial();
    let d = 8;
    let dd = d as f64;
    let u = gaussian_vector(SeedValue(0xA11CE), d).unwrap().into_inner();
    let v = gaussian_vector(SeedValue(0xB0B), d).unwrap().into_inner();
    let tr = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    // The stated form, for a symmetric uvᵀ (u = v).
    let stated = |a: &[f64]| -> Vec<f64> {
        let t = tr(a, a);
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for l in 0..d {
                let eye = if i == l { 1.0 } else { 0.0 };
                m[i * d + l] = dd / (dd + 2.0) * t * eye + 2.0 * dd / (dd + 2.0) * a[i] * a[l];
            }
        }
        m
    };
    // General uvᵀ: the identity holds with the symmetrized product.
    let general: Vec<f64> = (0..d * d)
        .map(|e| {
            let (i, l) = (e / d, e % d);
            let eye = if i == l { 1.0 } else { 0.0 };
            dd / (dd + 2.0) * (tr(&u, &v) * eye + u[i] * v[l] + v[i] * u[l])
        })
        .collect();

    let worst = |est: &decomfl::zo::MonteCarloEstimate, target: &[f64]| {
        est.mean.iter().zip(&est.stderr).zip(target).map(|((m, s), t)| (m - t).abs() / s).fold(0.0, f64::max)
    };
    let sym = mc_sphere_moment(Execution::Parallel, &u, &u, 200_000, SeedValue(61)).unwrap();
    let gen = mc_sphere_moment(Execution::Parallel, &u, &v, 200_000, SeedValue(62)).unwrap();
    let (w_sym, w_gen) = (worst(&sym, &stated(&u)), worst(&gen, &general));
    let passed = w_sym <= 5.0 && w_gen <= 5.0;
    report(
        "sphere-moment",
        passed,
        &format!(
            "d=8, 200000 samples: symmetric u=v max deviation {w_sym:.2} stderr, general uv^T (symmetrized) {w_gen:.2} stderr (<= 5)"
        ),
    );
    assert!(passed);
}

fn convergence_config(p: usize, rounds: u64, seed: u64) -> ExperimentConfig {
    let mut cfg = base_config(least_squares(50, 1000), (20, 5), (2, p), rounds, 0.2);
    cfg.mu = 1e-3;
    cfg.master_seed = seed;
    cfg
}

#[test]
fn convergence_at_desk_scale() {
    let _g = serial();
    let t = Instant::now();
    let out = run(&convergence_config(4, 2000, 0)).unwrap();
    let hit = out.metrics.iter().find(|r| r.grad_norm.unwrap() <= 1e-3).map(|r| r.round);

    let ps = [1usize, 2, 4, 8];
    let finals: Vec<f64> = ps
        .iter()
        .map(|&p| (1..=5).map(|s| run(&convergence_config(p, 300, s)).unwrap().metrics.last().unwrap().global_loss).sum::<f64>() / 5.0)
        .collect();
    let inversions = finals.windows(2).filter(|w| w[1] > w[0]).count();
    let passed = hit.is_some() && inversions <= 1;
    report(
        "convergence",
        passed,
        &format!(
            "grad norm <= 1e-3 first at round {hit:?} (limit 2000); mean final loss at 300 rounds for P=1,2,4,8: {finals:.6?}, {inversions} inversions (<= 1); {:.1}s",
            t.elapsed().as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn variant_equivalences() {
    let _g = serial();
    let mut comp_bitwise_bad = 0;
    let mut comp_worst: f64 = 0.0;
    let mut momentum_bad = 0;
    let mut prune_bad = 0;
    let same = |a: &[ParamVector], b: &[ParamVector]| a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y));
    for schedule in 0..100 {
        let snapshot = sync_schedule_config(schedule, false);
        let base = synced_run(&snapshot).unwrap();

        let mut comp = snapshot.clone();
        comp.compensation_sync = true;
        let comp = synced_run(&comp).unwrap();
        if !same(&base.clients, &comp.clients) {
            comp_bitwise_bad += 1;
        }
        for (x, y) in base.clients.iter().zip(&comp.clients) {
            comp_worst = comp_worst.max(x.max_rel_diff(y));
        }

        let mut heavy = snapshot.clone();
        heavy.momentum = Some(0.0);
        if !same(&base.clients, &synced_run(&heavy).unwrap().clients) {
            momentum_bad += 1;
        }

        let mut keep = snapshot.clone();
        keep.prune_history = false;
        let kept = synced_run(&keep).unwrap();
        assert_eq!(kept.output.server.as_ref().unwrap().history_base(), 0);
        if !same(&base.clients, &kept.clients) {
            prune_bad += 1;
        }
    }
    let passed = comp_bitwise_bad == 0 && momentum_bad == 0 && prune_bad == 0;
    report(
        "variant-equivalences",
        passed,
        &format!(
            "100 schedules each: compensation vs snapshot bitwise mismatches {comp_bitwise_bad} (max relative difference {comp_worst:.3e}); momentum beta=0 vs sgd mismatches {momentum_bad}; prune vs no-prune mismatches {prune_bad}"
        ),
    );
    assert!(passed);
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn transport_transparency() {
    let _g = serial();
    let t = Instant::now();
    let cfg = convergence_config(4, 2000, 9);
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, cfg.to_json()).unwrap();

    let local = dir.path().join("loopback");
    run(&cfg).unwrap().write(&local).unwrap();

    let remote = dir.path().join("tcp");
    let exe = env!("CARGO_BIN_EXE_decomfl");
    let mut server = Command::new(exe)
        .args(["serve", "--config", config_path.to_str().unwrap(), "--port", "0", "--out", remote.to_str().unwrap()])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    let clients: Vec<_> = (0..cfg.num_clients)
        .map(|id| Command::new(exe).args(["join", "--addr", &addr, "--id", &id.to_string()]).spawn().unwrap())
        .collect();
    let server_ok = server.wait().unwrap().success();
    let clients_ok = clients.into_iter().all(|mut c| c.wait().unwrap().success());
    let elapsed = t.elapsed();

    let files = ["metrics.csv", "ledger.json", "ledger.csv"];
    let identical: Vec<bool> =
        files.iter().map(|f| server_ok && read(&local.join(f)) == read(&remote.join(f))).collect();
    let passed = server_ok && clients_ok && identical.iter().all(|&b| b) && within(elapsed, 60.0);
    report(
        "transport-transparency",
        passed,
        &format!(
            "20 client processes, 2000 rounds: server ok {server_ok}, clients ok {clients_ok}, identical {files:?} = {identical:?}, {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn gradient_projection_gap() {
    let _g = serial();
    let mut worst: f64 = 0.0;
    for probe in 0..100u64 {
        let d = 3 + (probe % 17) as usize;
        let batch = random_spd_quadratic(d, 0.1, 5.0, 9000 + probe).unwrap();
        let task = LossTask::quadratic(d);
        let x = gaussian_vector(derive_seed(PerturbKey::new(SeedValue(31), probe, 0, 0)), d).unwrap();
        let z = gaussian_vector(derive_seed(PerturbKey::new(SeedValue(31), probe, 1, 0)), d).unwrap();
        let mu = 0.01 + 0.09 * ((probe * 37 % 100) as f64 / 99.0);
        let gap = (zo_scalar(&task, &x, &z, mu, &batch).unwrap() - proj_scalar(&task, &x, &z, &batch).unwrap()).abs();
        let zaz: f64 = (0..d)
            .map(|i| z.as_slice()[i] * batch.row(i).iter().zip(z.as_slice()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        worst = worst.max(max_rel(gap, 0.5 * mu * zaz.abs()));
    }
    let passed = worst <= 1e-9;
    report(
        "gradient-projection",
        passed,
        &format!("100 quadratic probes, mu in [0.01, 0.1]: max relative error {worst:.3e} (<= 1e-9)"),
    );
    assert!(passed);
}
