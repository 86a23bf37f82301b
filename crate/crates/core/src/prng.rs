//! Counter-based seed derivation and perturbation sampling.
//!
//! Everything here is a pure function of its inputs. The server and every
//! client regenerate the same perturbation vector from the same
//! [`SeedValue`] without ever exchanging the vector itself.
//!
//! Mixing uses the SplitMix64 finalizer [`mix64`]. A seed for the key
//! `(master, r, k, p)` is derived as
//!
//! ```text
//! h = mix64(master + GAMMA)
//! h = mix64((h ^ r) + GAMMA)
//! h = mix64((h ^ k) + GAMMA)
//! h = mix64((h ^ p) + GAMMA)
//! ```
//!
//! with wrapping arithmetic. The `i`-th draw of a seed's uniform stream is
//! `mix64(seed + (i + 1) * GAMMA)`, i.e. the SplitMix64 sequence started at
//! `seed`, addressable by index.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tasks::ParamVector;

/// Golden-ratio increment of SplitMix64.
pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// A 64-bit seed. Equal seeds produce bitwise-identical sample streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
#[derive(serde::Serialize, serde::Deserialize)]
pub struct SeedValue(pub u64);

/// Address of one perturbation: round `r`, local step `k`, perturbation `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PerturbKey {
    pub master: SeedValue,
    pub round: u64,
    pub step: u64,
    pub perturbation: u64,
}

impl PerturbKey {
    pub fn new(master: SeedValue, round: u64, step: u64, perturbation: u64) -> Self {
        Self { master, round, step, perturbation }
    }
}

/// SplitMix64 output finalizer. A bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn fold(h: u64, component: u64) -> u64 {
    mix64((h ^ component).wrapping_add(GAMMA))
}

pub fn derive_seed(key: PerturbKey) -> SeedValue {
    let h = mix64(key.master.0.wrapping_add(GAMMA));
    let h = fold(h, key.round);
    let h = fold(h, key.step);
    SeedValue(fold(h, key.perturbation))
}

/// Draw `index` of the uniform `u64` stream rooted at `seed`.
#[inline]
pub fn stream_u64(seed: SeedValue, index: u64) -> u64 {
    mix64(seed.0.wrapping_add(index.wrapping_add(1).wrapping_mul(GAMMA)))
}

/// Draw `index` of the stream mapped to the open interval (0, 1).
///
/// Uses the top 53 bits with a half-ulp offset, so neither 0 nor 1 can occur
/// and `ln` in Box–Muller is always finite.
#[inline]
pub fn stream_unit(seed: SeedValue, index: u64) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    ((stream_u64(seed, index) >> 11) as f64 + 0.5) * SCALE
}

/// Uniform integer in `[0, bound)` by the multiply-high method.
#[inline]
pub fn bounded(draw: u64, bound: u64) -> u64 {
    ((draw as u128 * bound as u128) >> 64) as u64
}

/// One Box–Muller pair from two uniforms in (0, 1).
#[inline]
pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let radius = (-2.0 * u1.ln()).sqrt();
    let angle = 2.0 * PI * u2;
    (radius * angle.cos(), radius * angle.sin())
}

/// Entry `i` of the Gaussian vector for `seed`. Entries `2j` and `2j + 1`
/// share the Box–Muller pair built from stream draws `2j` and `2j + 1`.
#[inline]
fn gaussian_entry(seed: SeedValue, i: usize) -> f64 {
    let pair = (i / 2) as u64;
    let (c, s) = box_muller(stream_unit(seed, 2 * pair), stream_unit(seed, 2 * pair + 1));
    if i.is_multiple_of(2) {
        c
    } else {
        s
    }
}

/// Standard normal vector of length `dim`.
pub fn gaussian_vector(seed: SeedValue, dim: usize) -> Result<ParamVector> {
    gaussian_vector_with(Execution::default(), seed, dim)
}

/// [`gaussian_vector`] with an explicit execution mode. Output does not
/// depend on the mode.
pub fn gaussian_vector_with(exec: Execution, seed: SeedValue, dim: usize) -> Result<ParamVector> {
    if dim == 0 {
        return Err(Error::EmptyDimension);
    }
    let mut out = vec![0.0; dim];
    par::fill_indexed(exec, &mut out, |i| gaussian_entry(seed, i));
    Ok(ParamVector::new(out))
}

/// Vector uniform on the sphere of radius `sqrt(dim)`.
///
/// Normalizes a Gaussian draw. If that draw is all zeros (probability zero)
/// the next seed `seed + 1` is tried.
pub fn sphere_vector(seed: SeedValue, dim: usize) -> Result<ParamVector> {
    let mut current = seed;
    loop {
        let mut g = gaussian_vector(current, dim)?;
        let norm = g.norm_sq().sqrt();
        if norm > 0.0 {
            let scale = (dim as f64).sqrt() / norm;
            g.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
            return Ok(g);
        }
        current = SeedValue(current.0.wrapping_add(1));
    }
}
