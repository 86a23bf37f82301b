//! Reference algorithms: FedZO with common or independent perturbations,
//! first-order FedAvg, and FedAvg with top-k or 8-bit compressed uplink.
//!
//! All of them move full models, so their per-round traffic grows with `d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::Charge;
use crate::par::{map_indices, Execution};
use crate::prng::{derive_seed, gaussian_vector, mix64, PerturbKey, SeedValue};
use crate::tasks::{LocalData, LossTask, ParamVector};
use crate::zo::{zo_scalar_from_base, zo_update, ZOConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaselineKind {
    Fedavg,
    FedzoCommon,
    FedzoIndependent,
    FedavgTopk { k: usize },
    FedcomQ8,
}

impl BaselineKind {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if let BaselineKind::FedavgTopk { k } = self {
            if *k == 0 || *k > dim {
                return Err(Error::Config(format!("top-k needs 1 <= k <= {dim}, got {k}")));
            }
        }
        Ok(())
    }

    /// Downlink and uplink traffic for one sampled client in one round.
    pub fn per_client_charges(&self, dim: usize) -> (Charge, Charge) {
        let d = dim as u64;
        let down = Charge::scalars(d);
        let up = match self {
            BaselineKind::Fedavg | BaselineKind::FedzoCommon | BaselineKind::FedzoIndependent => Charge::scalars(d),
            BaselineKind::FedavgTopk { k } => Charge { scalars: *k as u64, indices: *k as u64, ..Charge::default() },
            // Codes plus the one full-width scale.
            BaselineKind::FedcomQ8 => Charge { scalars: 1, quantized: d, ..Charge::default() },
        };
        (down, up)
    }
}

/// One participant of a baseline round.
#[derive(Debug, Clone, Copy)]
pub struct Participant<'a> {
    pub id: usize,
    pub task: &'a LossTask,
    pub data: &'a LocalData,
}

/// Whether FedZO clients share the round's perturbation directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedMode {
    Common,
    Independent,
}

/// Master seed of a client's private perturbation stream.
pub fn independent_master(master: SeedValue, client: usize) -> SeedValue {
    SeedValue(mix64(master.0 ^ mix64(client as u64 + 1)))
}

fn mean_models(models: &[ParamVector]) -> ParamVector {
    let dim = models[0].dim();
    let mut sum = vec![0.0; dim];
    for m in models {
        for (s, v) in sum.iter_mut().zip(m.as_slice()) {
            *s += v;
        }
    }
    let n = models.len() as f64;
    ParamVector::new(sum.into_iter().map(|s| s / n).collect())
}

/// Every participant pulls `x`, runs `K` zeroth-order steps, and the server
/// averages the end models in ascending participant order.
pub fn fedzo_end_model(
    x: &ParamVector,
    who: &Participant<'_>,
    master: SeedValue,
    round: u64,
    cfg: &ZOConfig,
    mode: SeedMode,
) -> Result<ParamVector> {
    let stream = match mode {
        SeedMode::Common => master,
        SeedMode::Independent => independent_master(master, who.id),
    };
    let mut xi = x.clone();
    for k in 0..cfg.local_steps as u64 {
        let batch = who.data.batch(who.id, round, k)?;
        let base = who.task.eval(&xi, &batch)?;
        let zs = (0..cfg.perturbations as u64)
            .map(|p| gaussian_vector(derive_seed(PerturbKey::new(stream, round, k, p)), x.dim()))
            .collect::<Result<Vec<_>>>()?;
        let gs = zs
            .iter()
            .map(|z| zo_scalar_from_base(who.task, &xi, base, z, cfg.mu, &batch))
            .collect::<Result<Vec<_>>>()?;
        xi = zo_update(&xi, &gs, &zs, cfg.lr)?;
    }
    Ok(xi)
}

pub fn fedzo_round(
    exec: Execution,
    x: &ParamVector,
    participants: &[Participant<'_>],
    master: SeedValue,
    round: u64,
    cfg: &ZOConfig,
    mode: SeedMode,
) -> Result<ParamVector> {
    if cfg.local_steps == 0 || participants.is_empty() {
        return Ok(x.clone());
    }
    let ends = map_indices(exec, participants.len(), |i| fedzo_end_model(x, &participants[i], master, round, cfg, mode))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_models(&ends))
}

/// `K` first-order SGD steps from `x` on one participant's batches.
pub fn sgd_end_model(x: &ParamVector, who: &Participant<'_>, round: u64, lr: f64, steps: usize) -> Result<ParamVector> {
    if !who.task.has_gradient() {
        return Err(Error::Capability("first-order baselines need an analytic gradient".into()));
    }
    let mut xi = x.clone();
    for k in 0..steps as u64 {
        let batch = who.data.batch(who.id, round, k)?;
        let g = who.task.grad(&xi, &batch)?;
        for (v, gi) in xi.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *v -= lr * gi;
        }
    }
    Ok(xi)
}

pub fn fedavg_round(
    exec: Execution,
    x: &ParamVector,
    participants: &[Participant<'_>],
    round: u64,
    lr: f64,
    steps: usize,
) -> Result<ParamVector> {
    compressed_fedavg_round(exec, x, participants, round, lr, steps, Ok)
}

/// FedAvg where each client uploads `compress(x_end − x)` and the server adds
/// the mean compressed update.
pub fn compressed_fedavg_round<C>(
    exec: Execution,
    x: &ParamVector,
    participants: &[Participant<'_>],
    round: u64,
    lr: f64,
    steps: usize,
    compress: C,
) -> Result<ParamVector>
where
    C: Fn(ParamVector) -> Result<ParamVector> + Sync + Send,
{
    if participants.is_empty() {
        return Ok(x.clone());
    }
    for who in participants {
        if !who.task.has_gradient() {
            return Err(Error::Capability("first-order baselines need an analytic gradient".into()));
        }
    }
    let deltas = map_indices(exec, participants.len(), |i| {
        let end = sgd_end_model(x, &participants[i], round, lr, steps)?;
        let delta = end.as_slice().iter().zip(x.as_slice()).map(|(e, s)| e - s).collect::<Vec<_>>();
        compress(ParamVector::new(delta))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mean = mean_models(&deltas);
    Ok(ParamVector::new(x.as_slice().iter().zip(mean.as_slice()).map(|(a, b)| a + b).collect()))
}

/// Keep the `k` largest-magnitude entries; ties go to the lower index.
pub fn topk(v: &ParamVector, k: usize) -> Result<ParamVector> {
    if k == 0 || k > v.dim() {
        return Err(Error::Config(format!("top-k needs 1 <= k <= {}, got {k}", v.dim())));
    }
    let s = v.as_slice();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].abs().total_cmp(&s[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; s.len()];
    for &i in &order[..k] {
        out[i] = s[i];
    }
    Ok(ParamVector::new(out))
}

/// Symmetric 8-bit quantization with `scale = max|v| / 127` and
/// round-half-to-even, returned dequantized.
pub fn quantize_dequantize_q8(v: &ParamVector) -> ParamVector {
    let max = v.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return v.clone();
    }
    let scale = max / 127.0;
    ParamVector::new(
        v.as_slice().iter().map(|x| (x / scale).round_ties_even().clamp(-127.0, 127.0) * scale).collect(),
    )
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tasks::{random_spd_quadratic, Batch};

    fn quad(d: usize, seed: u64) -> (LossTask, LocalData) {
        (LossTask::quadratic(d), LocalData::Fixed(random_spd_quadratic(d, 0.5, 2.0, seed).unwrap()))
    }

    #[test]
    fn zero_local_steps_leave_model_unchanged() {
        let (t, d) = quad(3, 0);
        let who = [Participant { id: 0, task: &t, data: &d }, Participant { id: 1, task: &t, data: &d }];
        let x = ParamVector::new(vec![0.1, 0.2, 0.3]);
        let cfg = ZOConfig { mu: 1e-3, perturbations: 1, lr: 0.1, local_steps: 0 };
        let out = fedzo_round(Execution::Sequential, &x, &who, SeedValue(1), 0, &cfg, SeedMode::Common).unwrap();
        assert!(out.bitwise_eq(&x));
    }

    #[test]
    fn independent_seeds_diverge_from_common_after_one_round() {
        let (t, d) = quad(4, 1);
        let who = [Participant { id: 1, task: &t, data: &d }];
        let x = ParamVector::new(vec![1.0, -1.0, 0.5, 0.0]);
        let cfg = ZOConfig { mu: 1e-3, perturbations: 1, lr: 0.1, local_steps: 1 };
        let a = fedzo_round(Execution::Sequential, &x, &who, SeedValue(2), 0, &cfg, SeedMode::Common).unwrap();
        let b = fedzo_round(Execution::Sequential, &x, &who, SeedValue(2), 0, &cfg, SeedMode::Independent).unwrap();
        // Distinct directions: the two single-step updates are along
        // different Gaussian vectors.
        let z_common = gaussian_vector(derive_seed(PerturbKey::new(SeedValue(2), 0, 0, 0)), 4).unwrap();
        let z_private =
            gaussian_vector(derive_seed(PerturbKey::new(independent_master(SeedValue(2), 1), 0, 0, 0)), 4).unwrap();
        assert!(!z_common.bitwise_eq(&z_private));
        assert!(!a.bitwise_eq(&b));
    }

    #[test]
    fn fedavg_zero_gradient_and_plain_step() {
        let t = LossTask::quadratic(2);
        let zero = LocalData::Fixed(Batch::quadratic(vec![0.0; 4], vec![0.0; 2]).unwrap());
        let x = ParamVector::new(vec![0.5, -0.5]);
        let who = [Participant { id: 0, task: &t, data: &zero }];
        assert!(fedavg_round(Execution::Sequential, &x, &who, 0, 0.1, 3).unwrap().bitwise_eq(&x));

        let a = vec![2.0, 0.0, 0.0, 1.0];
        let b = vec![1.0, -1.0];
        let data = LocalData::Fixed(Batch::quadratic(a, b).unwrap());
        let who = [Participant { id: 0, task: &t, data: &data }];
        let out = fedavg_round(Execution::Sequential, &x, &who, 0, 0.1, 1).unwrap();
        // x − η(Ax + b) = (0.5 − 0.1·2, −0.5 − 0.1·(−1.5))
        assert!((out.as_slice()[0] - 0.3).abs() < 1e-15);
        assert!((out.as_slice()[1] + 0.35).abs() < 1e-15);
    }

    #[test]
    fn opposite_linear_losses_cancel() {
        let t = LossTask::quadratic(3);
        let plus = LocalData::Fixed(Batch::quadratic(vec![0.0; 9], vec![1.0, -2.0, 0.5]).unwrap());
        let minus = LocalData::Fixed(Batch::quadratic(vec![0.0; 9], vec![-1.0, 2.0, -0.5]).unwrap());
        let x = ParamVector::new(vec![0.25, 0.5, 1.0]);
        let who = [Participant { id: 0, task: &t, data: &plus }, Participant { id: 1, task: &t, data: &minus }];
        let out = fedavg_round(Execution::Sequential, &x, &who, 0, 0.1, 1).unwrap();
        assert!(out.bitwise_eq(&x));
    }

    #[test]
    fn fedavg_needs_gradients() {
        let t = LossTask::tiny_mlp(2, 2);
        let data = LocalData::Fixed(Batch::new(vec![0.0, 1.0], 2, vec![1.0]).unwrap());
        let who = [Participant { id: 0, task: &t, data: &data }];
        let err = fedavg_round(Execution::Sequential, &ParamVector::zeros(t.dim()), &who, 0, 0.1, 1).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn topk_examples() {
        let v = ParamVector::new(vec![3.0, -5.0, 1.0]);
        assert_eq!(topk(&v, 3).unwrap(), v);
        assert_eq!(topk(&v, 1).unwrap().as_slice(), &[0.0, -5.0, 0.0]);
        assert_eq!(topk(&ParamVector::new(vec![2.0, -2.0]), 1).unwrap().as_slice(), &[2.0, 0.0]);
        assert!(topk(&v, 0).is_err());
    }

    #[test]
    fn q8_examples() {
        let zero = ParamVector::zeros(4);
        assert!(quantize_dequantize_q8(&zero).bitwise_eq(&zero));
        let s = 0.37;
        let v = ParamVector::new(vec![127.0 * s, 0.1, -3.0]);
        assert_eq!(quantize_dequantize_q8(&v).as_slice()[0], 127.0 * s);
    }

    #[test]
    fn charges_scale_with_dimension() {
        let (down, up) = BaselineKind::Fedavg.per_client_charges(100);
        assert_eq!((down.scalars, up.scalars), (100, 100));
        let (_, up) = BaselineKind::FedavgTopk { k: 7 }.per_client_charges(100);
        assert_eq!((up.scalars, up.indices), (7, 7));
        let (_, up) = BaselineKind::FedcomQ8.per_client_charges(100);
        assert_eq!((up.scalars, up.quantized), (1, 100));
    }

    proptest! {
        #[test]
        fn topk_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..40), k in 1usize..40) {
            let v = ParamVector::new(v);
            let k = k.min(v.dim());
            let once = topk(&v, k).unwrap();
            prop_assert_eq!(topk(&once, k).unwrap(), once);
        }

        #[test]
        fn q8_error_is_at_most_half_a_step(v in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let v = ParamVector::new(v);
            let max = v.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let q = quantize_dequantize_q8(&v);
            let err = v.as_slice().iter().zip(q.as_slice()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            prop_assert!(err <= max / 254.0, "err {} bound {}", err, max / 254.0);
        }
    }
}
