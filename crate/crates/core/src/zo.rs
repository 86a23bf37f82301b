//! Zeroth-order estimators and update rules.
//!
//! The forward-difference scalar `g = (f(x + μz; ξ) − f(x; ξ)) / μ` together
//! with the seed of `z` is everything a model update needs. The update over
//! `P` perturbations is `x ← x − (η/P) Σ_p g_p z_p`; every code path that
//! applies it (local update, rebuild, server materialization) goes through
//! [`StepRule::apply`], which accumulates `Σ_p g_p z_p` in ascending `p` and
//! then scales once, so all paths agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::prng::{derive_seed, gaussian_vector, sphere_vector, PerturbKey, SeedValue};
use crate::tasks::{Batch, LossTask, ParamVector};

/// Hyper-parameters of the zeroth-order local solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZOConfig {
    /// Smoothing parameter μ.
    pub mu: f64,
    /// Perturbations per local step, P.
    pub perturbations: usize,
    /// Step size η.
    pub lr: f64,
    /// Local steps per round, K.
    pub local_steps: usize,
}

impl Default for ZOConfig {
    fn default() -> Self {
        Self { mu: 1e-3, perturbations: 1, lr: 1e-3, local_steps: 1 }
    }
}

impl ZOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.perturbations == 0 || self.local_steps == 0 {
            return Err(Error::Config("perturbations and local_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Scalars exchanged per client per round, K·P.
    pub fn scalars_per_round(&self) -> usize {
        self.perturbations * self.local_steps
    }

    /// η/P.
    pub fn step_scale(&self) -> f64 {
        self.lr / self.perturbations as f64
    }
}

/// Forward-difference scalar. Both evaluations use `batch`.
pub fn zo_scalar(task: &LossTask, x: &ParamVector, z: &ParamVector, mu: f64, batch: &Batch) -> Result<f64> {
    let base = task.eval(x, batch)?;
    zo_scalar_from_base(task, x, base, z, mu, batch)
}

/// [`zo_scalar`] with `f(x; batch)` already computed. The local solver shares
/// one base evaluation across all P perturbations of a step.
pub fn zo_scalar_from_base(
    task: &LossTask,
    x: &ParamVector,
    base: f64,
    z: &ParamVector,
    mu: f64,
    batch: &Batch,
) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::Config(format!("mu must be positive, got {mu}")));
    }
    z.check_dim(x.dim())?;
    let shifted = ParamVector::new(x.as_slice().iter().zip(z.as_slice()).map(|(a, b)| a + mu * b).collect());
    let g = (task.eval(&shifted, batch)? - base) / mu;
    if !g.is_finite() {
        return Err(Error::NumericOverflow { index: 0 });
    }
    Ok(g)
}

/// Projection of the analytic gradient onto `z`, `⟨∇f(x; batch), z⟩`.
pub fn proj_scalar(task: &LossTask, x: &ParamVector, z: &ParamVector, batch: &Batch) -> Result<f64> {
    let grad = task.grad(x, batch)?;
    z.check_dim(grad.dim())?;
    Ok(grad.dot(z))
}

/// `Σ_p g_p z_p`, accumulated in ascending `p`.
pub fn direction_sum(scalars: &[f64], zs: &[ParamVector]) -> Result<Vec<f64>> {
    if scalars.len() != zs.len() || zs.is_empty() {
        return Err(Error::Contract(format!("{} scalars for {} perturbations", scalars.len(), zs.len())));
    }
    let dim = zs[0].dim();
    let mut delta = vec![0.0; dim];
    for (g, z) in scalars.iter().zip(zs) {
        z.check_dim(dim)?;
        for (d, v) in delta.iter_mut().zip(z.as_slice()) {
            *d += g * v;
        }
    }
    Ok(delta)
}

/// `x − (η/P) Σ_p g_p z_p` with `P = scalars.len()`.
pub fn zo_update(x: &ParamVector, scalars: &[f64], zs: &[ParamVector], lr: f64) -> Result<ParamVector> {
    let delta = direction_sum(scalars, zs)?;
    if delta.len() != x.dim() {
        return Err(Error::Contract(format!("update of dim {} for model of dim {}", delta.len(), x.dim())));
    }
    let mut out = x.clone();
    StepRule::Sgd.apply(out.as_mut_slice(), None, &delta, lr / scalars.len() as f64);
    Ok(out)
}

/// Local optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StepRule {
    #[default]
    Sgd,
    /// Heavy-ball momentum on the perturbation sum:
    /// `m ← β m + (1 − β) Σ_p g_p z_p`, `x ← x − (η/P) m`.
    Momentum { beta: f64 },
}

impl StepRule {
    pub fn validate(&self) -> Result<()> {
        if let StepRule::Momentum { beta } = self {
            if !(0.0..1.0).contains(beta) {
                return Err(Error::Config(format!("momentum beta must lie in [0, 1), got {beta}")));
            }
        }
        Ok(())
    }

    pub fn has_state(&self) -> bool {
        matches!(self, StepRule::Momentum { .. })
    }

    /// Apply one step with a precomputed `delta = Σ_p g_p z_p`.
    ///
    /// `momentum` must be `Some` exactly when the rule is stateful.
    pub fn apply(&self, x: &mut [f64], momentum: Option<&mut [f64]>, delta: &[f64], scale: f64) {
        match (self, momentum) {
            (StepRule::Sgd, _) => {
                for (xi, d) in x.iter_mut().zip(delta) {
                    *xi -= scale * d;
                }
            }
            (StepRule::Momentum { beta }, Some(m)) => {
                for ((xi, mi), d) in x.iter_mut().zip(m.iter_mut()).zip(delta) {
                    *mi = beta * *mi + (1.0 - beta) * d;
                    *xi -= scale * *mi;
                }
            }
            (StepRule::Momentum { .. }, None) => panic!("momentum step without momentum state"),
        }
    }
}

/// Regenerate the perturbation vectors for one local step.
pub fn perturbations(seeds: &[SeedValue], dim: usize) -> Result<Vec<ParamVector>> {
    seeds.iter().map(|s| gaussian_vector(*s, dim)).collect()
}

/// Monte-Carlo mean with per-coordinate standard errors.
#[derive(Debug, Clone)]
pub struct MonteCarloEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
}

impl MonteCarloEstimate {
    /// Builds the estimate from per-coordinate sums of samples and squares.
    fn from_moments(sum: &[f64], sum_sq: &[f64], n: usize) -> Self {
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let stderr = mean
            .iter()
            .zip(sum_sq)
            .map(|(m, s2)| {
                let var = (s2 / nf - m * m).max(0.0) * nf / (nf - 1.0).max(1.0);
                (var / nf).sqrt()
            })
            .collect();
        Self { mean, stderr, samples: n }
    }

    /// True when every coordinate is within `k` standard errors of `target`.
    pub fn within(&self, target: &[f64], k: f64) -> bool {
        self.mean
            .iter()
            .zip(&self.stderr)
            .zip(target)
            .all(|((m, s), t)| (m - t).abs() <= k * s)
    }
}

/// Sample seed `j` of a Monte-Carlo run rooted at `seed`.
fn sample_seed(seed: SeedValue, j: usize, p: usize) -> SeedValue {
    derive_seed(PerturbKey::new(seed, j as u64, 0, p as u64))
}

/// Estimate `∇f^μ(x) = E[g z]` from `n_samples` fresh Gaussian directions.
pub fn mc_smoothed_grad(
    exec: Execution,
    task: &LossTask,
    x: &ParamVector,
    mu: f64,
    n_samples: usize,
    seed: SeedValue,
    batch: &Batch,
) -> Result<MonteCarloEstimate> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let d = x.dim();
    let base = task.eval(x, batch)?;
    // Fail fast on the first sample so the parallel body can unwrap.
    let z0 = gaussian_vector(sample_seed(seed, 0, 0), d)?;
    zo_scalar_from_base(task, x, base, &z0, mu, batch)?;
    let moments = par::chunked_sum(exec, n_samples, 2 * d, |j, out| {
        let z = gaussian_vector(sample_seed(seed, j, 0), d).expect("dim checked");
        let g = zo_scalar_from_base(task, x, base, &z, mu, batch).unwrap_or(f64::NAN);
        for (i, zi) in z.as_slice().iter().enumerate() {
            let v = g * zi;
            out[i] = v;
            out[d + i] = v * v;
        }
    });
    if let Some(index) = moments.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { index: index % d });
    }
    Ok(MonteCarloEstimate::from_moments(&moments[..d], &moments[d..], n_samples))
}

/// Estimate `E[f(x + μz)] − f(x)`, the smoothing gap of `f^μ`.
pub fn mc_smoothing_gap(
    exec: Execution,
    task: &LossTask,
    x: &ParamVector,
    mu: f64,
    n_samples: usize,
    seed: SeedValue,
    batch: &Batch,
) -> Result<MonteCarloEstimate> {
    let d = x.dim();
    let base = task.eval(x, batch)?;
    let moments = par::chunked_sum(exec, n_samples, 2, |j, out| {
        let z = gaussian_vector(sample_seed(seed, j, 0), d).expect("dim checked");
        let g = zo_scalar_from_base(task, x, base, &z, mu, batch).unwrap_or(f64::NAN);
        let gap = mu * g;
        out[0] = gap;
        out[1] = gap * gap;
    });
    Ok(MonteCarloEstimate::from_moments(&moments[..1], &moments[1..], n_samples))
}

/// Monte-Carlo estimate of `E‖G_P − ∇f^μ(x)‖²` for the P-averaged estimator
/// `G_P = (1/P) Σ_p g_p z_p`. The centering uses the exact gradient supplied
/// by the caller.
pub fn mc_estimator_variance(
    exec: Execution,
    task: &LossTask,
    x: &ParamVector,
    center: &[f64],
    mu: f64,
    perturbations: usize,
    trials: usize,
    seed: SeedValue,
    batch: &Batch,
) -> Result<MonteCarloEstimate> {
    let d = x.dim();
    let base = task.eval(x, batch)?;
    let moments = par::chunked_sum(exec, trials, 2, |j, out| {
        let mut avg = vec![0.0; d];
        for p in 0..perturbations {
            let z = gaussian_vector(sample_seed(seed, j, p), d).expect("dim checked");
            let g = zo_scalar_from_base(task, x, base, &z, mu, batch).unwrap_or(f64::NAN);
            for (a, zi) in avg.iter_mut().zip(z.as_slice()) {
                *a += g * zi;
            }
        }
        let sq: f64 = avg
            .iter()
            .zip(center)
            .map(|(a, c)| {
                let e = a / perturbations as f64 - c;
                e * e
            })
            .sum();
        out[0] = sq;
        out[1] = sq * sq;
    });
    Ok(MonteCarloEstimate::from_moments(&moments[..1], &moments[1..], trials))
}

/// Monte-Carlo estimate of `E[g² ‖z‖²]`, the left side of the second-moment
/// bound `≤ (μ²/2) L² (d+6)³ + 2(d+4) ‖∇f(x)‖²`.
pub fn mc_second_moment(
    exec: Execution,
    task: &LossTask,
    x: &ParamVector,
    mu: f64,
    n_samples: usize,
    seed: SeedValue,
    batch: &Batch,
) -> Result<MonteCarloEstimate> {
    let d = x.dim();
    let base = task.eval(x, batch)?;
    let moments = par::chunked_sum(exec, n_samples, 2, |j, out| {
        let z = gaussian_vector(sample_seed(seed, j, 0), d).expect("dim checked");
        let g = zo_scalar_from_base(task, x, base, &z, mu, batch).unwrap_or(f64::NAN);
        let v = g * g * z.norm_sq();
        out[0] = v;
        out[1] = v * v;
    });
    Ok(MonteCarloEstimate::from_moments(&moments[..1], &moments[1..], n_samples))
}

/// Entrywise Monte-Carlo estimate of `E[z zᵀ u vᵀ z zᵀ]` for `z` uniform on
/// the sphere of radius `√d`. Row-major `d × d` result.
pub fn mc_sphere_moment(
    exec: Execution,
    u: &[f64],
    v: &[f64],
    n_samples: usize,
    seed: SeedValue,
) -> Result<MonteCarloEstimate> {
    let d = u.len();
    if d == 0 {
        return Err(Error::EmptyDimension);
    }
    if v.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: v.len() });
    }
    let dd = d * d;
    let moments = par::chunked_sum(exec, n_samples, 2 * dd, |j, out| {
        let z = sphere_vector(sample_seed(seed, j, 0), d).expect("dim checked");
        let z = z.as_slice();
        let s = crate::tasks::dot(u, z) * crate::tasks::dot(v, z);
        for i in 0..d {
            for l in 0..d {
                let m = z[i] * z[l] * s;
                out[i * d + l] = m;
                out[dd + i * d + l] = m * m;
            }
        }
    });
    Ok(MonteCarloEstimate::from_moments(&moments[..dd], &moments[dd..], n_samples))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tasks::random_spd_quadratic;

    fn identity_quadratic(d: usize) -> (LossTask, Batch) {
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = 1.0;
        }
        (LossTask::quadratic(d), Batch::quadratic(a, vec![0.0; d]).unwrap())
    }

    fn unit(d: usize, i: usize) -> ParamVector {
        let mut v = ParamVector::zeros(d);
        v.as_mut_slice()[i] = 1.0;
        v
    }

    #[test]
    fn constant_task_gives_zero_scalar() {
        let d = 3;
        let task = LossTask::quadratic_with_offset(d, 5.0);
        let batch = Batch::quadratic(vec![0.0; 9], vec![0.0; 3]).unwrap();
        let x = ParamVector::new(vec![1.0, -2.0, 0.5]);
        let z = ParamVector::new(vec![0.3, 0.1, -4.0]);
        for mu in [1e-3, 0.1, 2.0] {
            assert_eq!(zo_scalar(&task, &x, &z, mu, &batch).unwrap(), 0.0);
        }
    }

    #[test]
    fn identity_quadratic_hand_value() {
        let (task, batch) = identity_quadratic(2);
        let x = ParamVector::new(vec![1.0, 0.0]);
        let z = ParamVector::new(vec![1.0, 1.0]);
        // x·z + (μ/2)‖z‖² = 1 + 0.05 · 2
        let g = zo_scalar(&task, &x, &z, 0.1, &batch).unwrap();
        assert!((g - 1.1).abs() < 1e-12, "{g}");
        assert_eq!(proj_scalar(&task, &x, &z, &batch).unwrap(), 1.0);
    }

    #[test]
    fn linear_task_scalar_is_exact_directional_derivative() {
        let task = LossTask::quadratic(2);
        let batch = Batch::quadratic(vec![0.0; 4], vec![2.0, -1.0]).unwrap();
        let x = ParamVector::new(vec![0.0, 0.0]);
        let z = ParamVector::new(vec![1.0, 1.0]);
        for mu in [0.5, 1.0, 2.0] {
            assert_eq!(zo_scalar(&task, &x, &z, mu, &batch).unwrap(), 1.0);
        }
    }

    #[test]
    fn zero_mu_is_rejected() {
        let (task, batch) = identity_quadratic(2);
        let x = ParamVector::zeros(2);
        assert!(zo_scalar(&task, &x, &x, 0.0, &batch).is_err());
    }

    #[test]
    fn projection_vanishes_at_the_minimum() {
        let (task, batch) = identity_quadratic(4);
        let z = ParamVector::new(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(proj_scalar(&task, &ParamVector::zeros(4), &z, &batch).unwrap(), 0.0);
    }

    #[test]
    fn update_with_zero_scalars_is_identity() {
        let x = ParamVector::new(vec![0.1, -0.2, 0.3]);
        let zs = vec![ParamVector::new(vec![1.0, 2.0, 3.0]); 2];
        let out = zo_update(&x, &[0.0, 0.0], &zs, 0.7).unwrap();
        assert!(out.bitwise_eq(&x));
    }

    #[test]
    fn update_single_and_averaged_terms() {
        let out = zo_update(&ParamVector::zeros(3), &[2.0], &[unit(3, 0)], 0.5).unwrap();
        assert_eq!(out.as_slice(), &[-1.0, 0.0, 0.0]);
        let x = ParamVector::new(vec![1.0, 1.0]);
        let out = zo_update(&x, &[1.0, 3.0], &[unit(2, 0), unit(2, 0)], 1.0).unwrap();
        assert_eq!(out.as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn update_length_mismatch_is_a_contract_error() {
        let x = ParamVector::zeros(2);
        assert!(matches!(zo_update(&x, &[1.0, 2.0], &[unit(2, 0)], 1.0), Err(Error::Contract(_))));
        assert!(matches!(zo_update(&x, &[1.0], &[unit(3, 0)], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn momentum_with_zero_beta_matches_sgd_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let delta: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut b = a.clone();
        let mut m: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        StepRule::Sgd.apply(&mut a, None, &delta, 0.3);
        StepRule::Momentum { beta: 0.0 }.apply(&mut b, Some(&mut m), &delta, 0.3);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn momentum_two_step_hand_recursion() {
        // g·z fixed at (1, 2) then (3, -1); β = 0.5, η/P = 0.1, start at 0.
        let rule = StepRule::Momentum { beta: 0.5 };
        let mut x = vec![0.0, 0.0];
        let mut m = vec![0.0, 0.0];
        rule.apply(&mut x, Some(&mut m), &[1.0, 2.0], 0.1);
        assert_eq!(m, vec![0.5, 1.0]);
        assert_eq!(x, vec![-0.05, -0.1]);
        rule.apply(&mut x, Some(&mut m), &[3.0, -1.0], 0.1);
        assert_eq!(m, vec![1.75, 0.0]);
        assert!((x[0] + 0.225).abs() < 1e-15 && (x[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn beta_outside_unit_interval_is_rejected() {
        assert!(StepRule::Momentum { beta: 1.0 }.validate().is_err());
        assert!(StepRule::Momentum { beta: -0.1 }.validate().is_err());
        assert!(StepRule::Momentum { beta: 0.9 }.validate().is_ok());
    }

    #[test]
    fn forward_difference_gap_is_linear_in_mu() {
        let d = 6;
        let batch = random_spd_quadratic(d, 0.5, 2.0, 1).unwrap();
        let task = LossTask::quadratic(d);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = ParamVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
            let z = ParamVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
            let proj = proj_scalar(&task, &x, &z, &batch).unwrap();
            let gap = |mu: f64| zo_scalar(&task, &x, &z, mu, &batch).unwrap() - proj;
            let ratio = gap(0.02) / gap(0.01);
            assert!((ratio - 2.0).abs() <= 0.2, "ratio {ratio}");
        }
    }

    #[test]
    fn constant_task_smoothed_gradient_is_zero() {
        let task = LossTask::quadratic_with_offset(3, 5.0);
        let batch = Batch::quadratic(vec![0.0; 9], vec![0.0; 3]).unwrap();
        let est =
            mc_smoothed_grad(Execution::Parallel, &task, &ParamVector::zeros(3), 0.01, 1000, SeedValue(1), &batch)
                .unwrap();
        assert!(est.mean.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn smoothed_gradient_matches_analytic_gradient_on_quadratic() {
        let d = 5;
        let batch = random_spd_quadratic(d, 0.5, 2.0, 2).unwrap();
        let task = LossTask::quadratic(d);
        let x = ParamVector::new(vec![0.3, -0.7, 1.0, 0.2, -0.4]);
        let exact = task.grad(&x, &batch).unwrap();
        let est = mc_smoothed_grad(Execution::Parallel, &task, &x, 1e-3, 200_000, SeedValue(3), &batch).unwrap();
        assert!(est.within(exact.as_slice(), 5.0), "{:?} vs {:?}", est.mean, exact);
    }

    #[test]
    fn smoothing_gap_is_half_mu_squared_trace() {
        let d = 4;
        let batch = random_spd_quadratic(d, 1.0, 3.0, 4).unwrap();
        let task = LossTask::quadratic(d);
        let x = ParamVector::new(vec![0.5, 0.5, -0.5, 0.0]);
        let mu = 0.5;
        let trace: f64 = (0..d).map(|i| batch.row(i)[i]).sum();
        let est = mc_smoothing_gap(Execution::Parallel, &task, &x, mu, 200_000, SeedValue(4), &batch).unwrap();
        assert!(est.within(&[0.5 * mu * mu * trace], 5.0), "{} vs {}", est.mean[0], 0.5 * mu * mu * trace);
    }

    #[test]
    fn monte_carlo_is_identical_across_execution_modes() {
        let (task, batch) = identity_quadratic(3);
        let x = ParamVector::new(vec![1.0, 2.0, 3.0]);
        let a = mc_smoothed_grad(Execution::Sequential, &task, &x, 0.1, 10_000, SeedValue(9), &batch).unwrap();
        let b = mc_smoothed_grad(Execution::Parallel, &task, &x, 0.1, 10_000, SeedValue(9), &batch).unwrap();
        assert_eq!(a.mean, b.mean);
    }
}
