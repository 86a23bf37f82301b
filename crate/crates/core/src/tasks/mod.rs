//! Loss tasks, parameter vectors and mini-batches.
//!
//! A [`LossTask`] is an immutable description of `f(x; batch)`. All
//! reductions are left folds in ascending index order, so evaluation is
//! bitwise reproducible for a fixed batch.

mod dataset;
mod partition;

pub use dataset::{random_spd_quadratic, Dataset, LocalData, SyntheticLeastSquares};
pub use partition::{dirichlet_partition, Shard};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    /// Equality of the IEEE-754 bit patterns, entry by entry.
    pub fn bitwise_eq(&self, other: &ParamVector) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest entrywise relative difference, normalized by the larger magnitude
    /// of the two vectors (infinity norm).
    pub fn max_rel_diff(&self, other: &ParamVector) -> f64 {
        let scale = self
            .0
            .iter()
            .chain(&other.0)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / scale
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch { expected, got: self.dim() });
        }
        Ok(())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Rows of features with one target per row, row-major.
///
/// For quadratic tasks the rows are the matrix `A` and the labels the
/// vector `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    cols: usize,
    labels: Vec<f64>,
}

impl Batch {
    pub fn new(features: Vec<f64>, cols: usize, labels: Vec<f64>) -> Result<Self> {
        if labels.is_empty() || cols == 0 {
            return Err(Error::Contract("batch must have at least one row and column".into()));
        }
        if features.len() != labels.len() * cols {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * cols,
                got: features.len(),
            });
        }
        Ok(Self { features, cols, labels })
    }

    /// Batch encoding `½ xᵀ A x + bᵀ x` with `a` given row-major.
    pub fn quadratic(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let d = b.len();
        Self::new(a, d, b)
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
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

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// A copy with rows reordered as `order[new] = old`.
    pub fn permuted(&self, order: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(self.features.len());
        let mut labels = Vec::with_capacity(order.len());
        for &i in order {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch { features, cols: self.cols, labels }
    }
}

/// The family of a loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `½ xᵀ A x + bᵀ x + offset`, `(A, b)` carried by the batch.
    Quadratic { offset: f64 },
    /// Mean of `½ (aᵀx − y)²` over rows.
    LeastSquares,
    /// Binary cross-entropy of `sigmoid(aᵀx)` against labels in {0, 1}.
    Logistic,
    /// One tanh hidden layer and a sigmoid output, binary cross-entropy.
    /// Evaluation only.
    TinyMlp { inputs: usize, hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTask {
    kind: TaskKind,
    dim: usize,
}

impl LossTask {
    pub fn quadratic(dim: usize) -> Self {
        Self { kind: TaskKind::Quadratic { offset: 0.0 }, dim }
    }

    pub fn quadratic_with_offset(dim: usize, offset: f64) -> Self {
        Self { kind: TaskKind::Quadratic { offset }, dim }
    }

    pub fn least_squares(dim: usize) -> Self {
        Self { kind: TaskKind::LeastSquares, dim }
    }

    pub fn logistic(dim: usize) -> Self {
        Self { kind: TaskKind::Logistic, dim }
    }

    /// Parameter layout: `W1` (hidden × inputs, row-major), `b1`, `w2`, `b2`.
    pub fn tiny_mlp(inputs: usize, hidden: usize) -> Self {
        Self { kind: TaskKind::TinyMlp { inputs, hidden }, dim: hidden * inputs + 2 * hidden + 1 }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_gradient(&self) -> bool {
        !matches!(self.kind, TaskKind::TinyMlp { .. })
    }

    /// Width of a feature row this task expects.
    pub fn feature_width(&self) -> usize {
        match self.kind {
            TaskKind::TinyMlp { inputs, .. } => inputs,
            _ => self.dim,
        }
    }

    fn check(&self, x: &ParamVector, batch: &Batch) -> Result<()> {
        x.check_dim(self.dim)?;
        if batch.cols() != self.feature_width() {
            return Err(Error::DimensionMismatch { expected: self.feature_width(), got: batch.cols() });
        }
        if let TaskKind::Quadratic { .. } = self.kind {
            if batch.rows() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, got: batch.rows() });
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &ParamVector, batch: &Batch) -> Result<f64> {
        self.check(x, batch)?;
        let x = x.as_slice();
        let value = match self.kind {
            TaskKind::Quadratic { offset } => {
                let mut quad = 0.0;
                for i in 0..batch.rows() {
                    quad += x[i] * dot(batch.row(i), x);
                    if !quad.is_finite() {
                        return Err(Error::NumericOverflow { index: i });
                    }
                }
                0.5 * quad + dot(batch.labels(), x) + offset
            }
            TaskKind::LeastSquares => mean_over_rows(batch, |a, y| {
                let r = dot(a, x) - y;
                0.5 * r * r
            })?,
            TaskKind::Logistic => mean_over_rows(batch, |a, y| cross_entropy(dot(a, x), y))?,
            TaskKind::TinyMlp { inputs, hidden } => {
                let mut h = vec![0.0; hidden];
                mean_over_rows(batch, |a, y| cross_entropy(mlp_logit(x, a, inputs, &mut h), y))?
            }
        };
        if !value.is_finite() {
            return Err(Error::NumericOverflow { index: 0 });
        }
        Ok(value)
    }

    pub fn grad(&self, x: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        self.check(x, batch)?;
        let xs = x.as_slice();
        let mut g = vec![0.0; self.dim];
        match self.kind {
            TaskKind::Quadratic { .. } => {
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi = dot(batch.row(i), xs) + batch.label(i);
                }
            }
            TaskKind::LeastSquares | TaskKind::Logistic => {
                for i in 0..batch.rows() {
                    let a = batch.row(i);
                    let z = dot(a, xs);
                    let residual = match self.kind {
                        TaskKind::LeastSquares => z - batch.label(i),
                        _ => sigmoid(z) - batch.label(i),
                    };
                    for (gj, aj) in g.iter_mut().zip(a) {
                        *gj += residual * aj;
                    }
                }
                let n = batch.rows() as f64;
                g.iter_mut().for_each(|v| *v /= n);
            }
            TaskKind::TinyMlp { .. } => {
                return Err(Error::Capability("tiny-mlp is evaluation-only".into()));
            }
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { index });
        }
        Ok(ParamVector::new(g))
    }
}

fn mean_over_rows<F>(batch: &Batch, mut per_row: F) -> Result<f64>
where
    F: FnMut(&[f64], f64) -> f64,
{
    let mut acc = 0.0;
    for i in 0..batch.rows() {
        let v = per_row(batch.row(i), batch.label(i));
        if !v.is_finite() {
            return Err(Error::NumericOverflow { index: i });
        }
        acc += v;
    }
    Ok(acc / batch.rows() as f64)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z) − y z`, stable for large `|z|`.
#[inline]
fn cross_entropy(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

fn mlp_logit(params: &[f64], a: &[f64], inputs: usize, hidden_buf: &mut [f64]) -> f64 {
    let hidden = hidden_buf.len();
    let (w1, rest) = params.split_at(hidden * inputs);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(hidden);
    for (j, h) in hidden_buf.iter_mut().enumerate() {
        *h = (dot(&w1[j * inputs..(j + 1) * inputs], a) + b1[j]).tanh();
    }
    dot(w2, hidden_buf) + b2[0]
}
