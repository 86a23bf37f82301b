use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::Dataset;
use crate::error::{Error, Result};
use crate::prng::{derive_seed, PerturbKey, SeedValue};

/// The rows owned by one client, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

/// Split `dataset` across `clients` with per-class proportions drawn from
/// `Dirichlet(alpha · 1)`.
///
/// Classes are processed in ascending id. For class `q` (its ordinal), the
/// proportions come from `Gamma(alpha, 1)` draws of a ChaCha8 generator
/// seeded with `derive_seed(seed, q, 0, 0)`; the class's rows (ascending)
/// are cut at `floor(cumulative share · count)`. A client left with no rows
/// then takes the last row of the currently largest shard (lowest id on
/// ties), so every shard is non-empty.
pub fn dirichlet_partition(dataset: &Dataset, clients: usize, alpha: f64, seed: SeedValue) -> Result<Vec<Shard>> {
    if clients == 0 {
        return Err(Error::Config("client count must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if clients > dataset.len() {
        return Err(Error::InfeasiblePartition { clients, samples: dataset.len() });
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in dataset.classes().iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (ordinal, rows) in by_class.values().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(PerturbKey::new(seed, ordinal as u64, 0, 0)).0);
        let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let count = rows.len();
        let mut start = 0usize;
        let mut cumulative = 0.0;
        for (client, draw) in draws.iter().enumerate() {
            let end = if client + 1 == clients {
                count
            } else if total > 0.0 {
                cumulative += draw / total;
                ((cumulative * count as f64).floor() as usize).clamp(start, count)
            } else {
                // Every draw underflowed: give the whole class to client 0.
                count
            };
            shards[client].extend_from_slice(&rows[start..end]);
            start = end;
        }
    }
    for client in 0..clients {
        if shards[client].is_empty() {
            let donor = (0..clients)
                .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
                .expect("clients >= 1");
            let row = shards[donor].pop().expect("dataset has more rows than clients");
            shards[client].push(row);
        }
    }
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            Shard { client_id, indices }
        })
        .collect())
}
