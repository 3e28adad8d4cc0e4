//! Dense vector primitives, softmax, angles, the seeded random stream and a
//! central-difference gradient oracle.
//!
//! Vectors are plain `&[f64]` slices; only probability vectors get a
//! dedicated type because their invariant (non-negative, sums to one) is
//! relied on downstream.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256StarStar};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("dot", a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("cosine_sim", a.len(), b.len())?;
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot_unchecked(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Angle between `a` and `b` in degrees, in `[0, 180]`.
pub fn angle_deg(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine_sim(a, b)?.acos().to_degrees())
}

/// Returns `a / ‖a‖`, or a degenerate-input error for the zero vector.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// A probability vector: entries are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps `p` after checking non-negativity and a unit sum within 1e-12.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Dimension("empty probability vector".into()));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Parameter("probabilities must be finite and >= 0".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("probabilities sum to {s}")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Temperature softmax `exp(z_i/τ) / Σ_j exp(z_j/τ)`, evaluated with max-subtraction.
pub fn softmax(logits: &[f64], tau: f64) -> Result<ProbVector> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    if !all_finite(logits) {
        return Err(Error::Numerical("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| ((z - max) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    for x in &mut out {
        *x /= total;
    }
    Ok(ProbVector(out))
}

/// Central-difference gradient `(f(x+h·e_i) − f(x−h·e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be > 0, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe)?;
        probe[i] = orig - h;
        let fm = f(&probe)?;
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numerical(format!("non-finite evaluation at coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Deterministic random stream: xoshiro256** whose 256-bit state is filled
/// from splitmix64 seeded with a 64-bit seed.
///
/// Uniforms are `(next_u64 >> 11) · 2⁻⁵³` in `[0, 1)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: Xoshiro256StarStar,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { inner: Xoshiro256StarStar::seed_from_u64(seed) }
    }

    /// Independent child stream identified by `(seed, stream)`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(derive_seed(seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection, so there is no modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Fisher–Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Unit vector uniformly distributed on the sphere.
    pub fn unit_vector(&mut self, n: usize) -> Vec<f64> {
        loop {
            let g = self.gaussian_vec(n, 0.0, 1.0);
            if let Ok(u) = normalize(&g) {
                return u;
            }
        }
    }

    fn gaussian_vec(&mut self, n: usize, mean: f64, sigma: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            // u1 in (0, 1] keeps the log finite.
            let u1 = 1.0 - self.next_f64();
            let u2 = self.next_f64();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            out.push(mean + sigma * r * theta.cos());
            if out.len() < n {
                out.push(mean + sigma * r * theta.sin());
            }
        }
        out
    }
}

/// Mixes a stream id into a seed with one splitmix64 step.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut sm = SplitMix64::seed_from_u64(seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    sm.next_u64()
}

/// `n` i.i.d. draws from N(mean, sigma²) using Box–Muller.
///
/// Each pair of uniforms `(u1, u2)` yields `r·cos(2πu2)` then `r·sin(2πu2)`
/// with `u1` mapped to `(0, 1]`; an odd `n` drops the final sine.
pub fn sample_gaussian(rng: &mut RngStream, n: usize, mean: f64, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be >= 0, got {sigma}")));
    }
    if n == 0 {
        return Err(Error::Parameter("sample count must be >= 1".into()));
    }
    if sigma == 0.0 {
        return Ok(vec![mean; n]);
    }
    Ok(rng.gaussian_vec(n, mean, sigma))
}
