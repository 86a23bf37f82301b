use std::io::BufRead;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{dot, Batch, ParamVector};
use crate::error::{Error, Result};
use crate::prng::{bounded, derive_seed, mix64, stream_u64, PerturbKey, SeedValue};

/// Domain tag mixed into batch-sampling seeds so they never coincide with
/// perturbation seeds derived from the same number.
const BATCH_DOMAIN: u64 = 0xBA7C_4000_0000_0001;

/// Row-major samples with a target and a class id per row.
///
/// Class ids drive non-IID partitioning; for regression data they are
/// cluster ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    cols: usize,
    labels: Vec<f64>,
    classes: Vec<usize>,
}

/// Output of [`Dataset::synthetic_least_squares`].
#[derive(Debug, Clone)]
pub struct SyntheticLeastSquares {
    pub dataset: Dataset,
    /// Noise-free labels are generated as `y = aᵀ x_star`.
    pub x_star: ParamVector,
}

impl Dataset {
    pub fn new(features: Vec<f64>, cols: usize, labels: Vec<f64>, classes: Vec<usize>) -> Result<Self> {
        if cols == 0 || labels.is_empty() {
            return Err(Error::Contract("dataset must have rows and columns".into()));
        }
        if features.len() != labels.len() * cols || classes.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: labels.len() * cols, got: features.len() });
        }
        Ok(Self { features, cols, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.cols..(i + 1) * self.cols]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Gather rows into a batch, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut features = Vec::with_capacity(indices.len() * self.cols);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, self.cols, labels)
    }

    /// Parse CSV with a header row; every field a float, last column the label.
    /// Non-negative integral labels double as class ids, otherwise every row
    /// is class 0.
    pub fn from_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| Error::Config("empty csv".into()))??;
        let width = header.split(',').count();
        if width < 2 {
            return Err(Error::Config("csv needs at least one feature and a label".into()));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("csv line {}: {e}", n + 2)))?;
            if fields.len() != width {
                return Err(Error::Config(format!("csv line {}: expected {width} fields", n + 2)));
            }
            features.extend_from_slice(&fields[..width - 1]);
            labels.push(fields[width - 1]);
        }
        let integral = labels.iter().all(|y| *y >= 0.0 && y.fract() == 0.0);
        let classes = labels.iter().map(|y| if integral { *y as usize } else { 0 }).collect();
        Self::new(features, width - 1, labels, classes)
    }

    /// Least-squares data around `clusters` Gaussian blobs.
    ///
    /// Row `j` belongs to cluster `j % clusters`; its features are
    /// `(c + e) / sqrt(dim)` with center `c ~ N(0, spread² I)` and
    /// `e ~ N(0, I)`, so rows have norm close to one. Labels are exact:
    /// `y = aᵀ x_star` with `x_star ~ N(0, I)`, hence every client loss is
    /// minimized at the same point.
    pub fn synthetic_least_squares(
        rows: usize,
        dim: usize,
        clusters: usize,
        spread: f64,
        seed: u64,
    ) -> Result<SyntheticLeastSquares> {
        if dim == 0 {
            return Err(Error::EmptyDimension);
        }
        let clusters = clusters.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_star: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let centers: Vec<f64> = (0..clusters * dim).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect();
        let scale = 1.0 / (dim as f64).sqrt();
        let mut features = Vec::with_capacity(rows * dim);
        let mut labels = Vec::with_capacity(rows);
        let mut classes = Vec::with_capacity(rows);
        for j in 0..rows {
            let c = j % clusters;
            let start = features.len();
            for t in 0..dim {
                let e: f64 = rng.sample(StandardNormal);
                features.push((centers[c * dim + t] + e) * scale);
            }
            labels.push(dot(&features[start..], &x_star));
            classes.push(c);
        }
        Ok(SyntheticLeastSquares {
            dataset: Self::new(features, dim, labels, classes)?,
            x_star: ParamVector::new(x_star),
        })
    }

    /// Two Gaussian blobs for binary classification.
    ///
    /// The first `dim - 1` features are `N(±separation/2 · u, I)` with a random
    /// unit direction `u`; the last feature is a constant 1 acting as bias.
    /// Row `j` has label `j % 2`.
    pub fn synthetic_blobs(rows: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("blob data needs dim >= 2 (one bias column)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..dim - 1).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dot(&raw, &raw).sqrt().max(f64::MIN_POSITIVE);
        let direction: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        let mut features = Vec::with_capacity(rows * dim);
        let mut labels = Vec::with_capacity(rows);
        let mut classes = Vec::with_capacity(rows);
        for j in 0..rows {
            let class = j % 2;
            let sign = if class == 1 { 0.5 } else { -0.5 };
            for u in &direction {
                let e: f64 = rng.sample(StandardNormal);
                features.push(sign * separation * u + e);
            }
            features.push(1.0);
            labels.push(class as f64);
            classes.push(class);
        }
        Self::new(features, dim, labels, classes)
    }
}

/// Random symmetric positive-definite quadratic `(A, b)` with
/// `A = Q diag(λ) Qᵀ`, `λ` evenly spaced on `[lambda_min, lambda_max]` and `Q`
/// from Gram–Schmidt on a Gaussian matrix. `b ~ N(0, I)`.
pub fn random_spd_quadratic(dim: usize, lambda_min: f64, lambda_max: f64, seed: u64) -> Result<Batch> {
    if dim == 0 {
        return Err(Error::EmptyDimension);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Columns of Q, stored as rows of `q`.
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while q.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for basis in &q {
            let proj = dot(&v, basis);
            v.iter_mut().zip(basis).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
    }
    let lambdas: Vec<f64> = (0..dim)
        .map(|i| {
            if dim == 1 {
                lambda_min
            } else {
                lambda_min + (lambda_max - lambda_min) * i as f64 / (dim - 1) as f64
            }
        })
        .collect();
    let mut a = vec![0.0; dim * dim];
    for r in 0..dim {
        for c in r..dim {
            let v = (0..dim).fold(0.0, |acc, t| acc + q[t][r] * lambdas[t] * q[t][c]);
            a[r * dim + c] = v;
            a[c * dim + r] = v;
        }
    }
    let b = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Batch::quadratic(a, b)
}

/// Where a client's mini-batches come from.
#[derive(Debug, Clone)]
pub enum LocalData {
    /// Rows of a shared dataset.
    Shard {
        dataset: Arc<Dataset>,
        indices: Vec<usize>,
        /// Rows per step, drawn with replacement. Zero (or at least the shard
        /// size) means the whole shard in ascending order.
        batch_size: usize,
        data_seed: SeedValue,
    },
    /// The same batch at every step.
    Fixed(Batch),
}

impl LocalData {
    /// Mini-batch for `client` at round `round`, local step `step`. A pure
    /// function of its arguments.
    pub fn batch(&self, client: usize, round: u64, step: u64) -> Result<Batch> {
        match self {
            LocalData::Fixed(batch) => Ok(batch.clone()),
            LocalData::Shard { dataset, indices, batch_size, data_seed } => {
                if indices.is_empty() {
                    return Err(Error::Contract(format!("client {client} has an empty shard")));
                }
                if *batch_size == 0 || *batch_size >= indices.len() {
                    return dataset.batch(indices);
                }
                let seed = derive_seed(PerturbKey::new(
                    SeedValue(mix64(data_seed.0 ^ BATCH_DOMAIN)),
                    round,
                    step,
                    client as u64,
                ));
                let len = indices.len() as u64;
                let picks: Vec<usize> = (0..*batch_size as u64)
                    .map(|j| indices[bounded(stream_u64(seed, j), len) as usize])
                    .collect();
                dataset.batch(&picks)
            }
        }
    }

    /// Every local row, used for full-objective evaluation.
    pub fn full_batch(&self) -> Result<Batch> {
        match self {
            LocalData::Fixed(batch) => Ok(batch.clone()),
            LocalData::Shard { dataset, indices, .. } => dataset.batch(indices),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::LossTask;

    #[test]
    fn csv_round_trip() {
        let text = "a,b,label\n1.0,2.0,1\n-0.5,3,0\n";
        let ds = Dataset::from_csv(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.cols(), 2);
        assert_eq!(ds.row(1), &[-0.5, 3.0]);
        assert_eq!(ds.classes(), &[1, 0]);
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let text = "a,b,label\n1.0,2.0\n";
        assert!(matches!(Dataset::from_csv(text.as_bytes()), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_least_squares_is_consistent_at_x_star() {
        let gen = Dataset::synthetic_least_squares(200, 8, 4, 1.0, 9).unwrap();
        let task = LossTask::least_squares(8);
        let batch = gen.dataset.batch(&(0..200).collect::<Vec<_>>()).unwrap();
        assert!(task.eval(&gen.x_star, &batch).unwrap() < 1e-25);
        let again = Dataset::synthetic_least_squares(200, 8, 4, 1.0, 9).unwrap();
        assert_eq!(gen.dataset, again.dataset);
    }

    #[test]
    fn spd_quadratic_has_requested_spectrum() {
        let batch = random_spd_quadratic(5, 1.0, 3.0, 4).unwrap();
        // trace equals the sum of the eigenvalues
        let trace: f64 = (0..5).map(|i| batch.row(i)[i]).sum();
        assert!((trace - 10.0).abs() < 1e-12);
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(batch.row(r)[c], batch.row(c)[r]);
            }
        }
    }

    #[test]
    fn batches_are_deterministic_and_from_the_shard() {
        let gen = Dataset::synthetic_least_squares(100, 3, 2, 1.0, 1).unwrap();
        let data = LocalData::Shard {
            dataset: Arc::new(gen.dataset.clone()),
            indices: vec![3, 10, 50, 77],
            batch_size: 3,
            data_seed: SeedValue(5),
        };
        let a = data.batch(2, 4, 1).unwrap();
        assert_eq!(a, data.batch(2, 4, 1).unwrap());
        assert_eq!(a.rows(), 3);
        for i in 0..a.rows() {
            assert!([3, 10, 50, 77].iter().any(|&j| gen.dataset.row(j) == a.row(i)));
        }
    }
}
