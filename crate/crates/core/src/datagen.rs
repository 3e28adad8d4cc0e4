//! Synthetic domains on the unit sphere and few-shot episodes.
//!
//! The pre-trained domain puts one prototype near each teacher class
//! feature. A downstream domain is the pre-trained one rotated and shifted
//! by the gap parameters. Images are `normalize(prototype + N(0, σ²))`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Batch;
use crate::numerics::{dot_unchecked, normalize, sample_gaussian, RngStream};
use crate::vlm::FrozenVlm;

/// Test images drawn per class.
pub const TEST_PER_CLASS: usize = 100;

// Substream ids.
const STREAM_PROTOTYPES: u64 = 1;
const STREAM_ROTATION: u64 = 2;
const STREAM_SHIFT: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_TRAIN: u64 = 5;
const STREAM_TEST: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainSpec {
    pub k: usize,
    pub feat_dim: usize,
    pub gap_rotation_deg: f64,
    pub gap_shift: f64,
    pub noise_sigma: f64,
    /// Per-coordinate jitter between teacher features and prototypes.
    pub prototype_jitter: f64,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            k: 10,
            feat_dim: 32,
            gap_rotation_deg: 30.0,
            gap_shift: 0.0,
            noise_sigma: 0.1,
            prototype_jitter: 0.05,
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.feat_dim < 2 {
            return Err(Error::Config(format!("need k >= 2 and feat_dim >= 2, got {} and {}", self.k, self.feat_dim)));
        }
        let finite = [self.gap_rotation_deg, self.gap_shift, self.noise_sigma, self.prototype_jitter];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("domain parameters must be finite".into()));
        }
        if self.gap_rotation_deg < 0.0 || self.gap_shift < 0.0 || self.prototype_jitter < 0.0 {
            return Err(Error::Config("gap parameters and jitter must be >= 0".into()));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::Config("noise_sigma must be > 0".into()));
        }
        Ok(())
    }

    /// The same spec with different gap parameters.
    pub fn with_gap(&self, rotation_deg: f64, shift: f64) -> Self {
        Self { gap_rotation_deg: rotation_deg, gap_shift: shift, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub train: Batch,
    pub test: Batch,
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub shots: usize,
}

/// Prototypes of the pre-trained domain: each teacher class feature plus a
/// small seeded jitter, renormalised.
pub fn teacher_aligned_prototypes(vlm: &FrozenVlm, spec: &DomainSpec) -> Result<Vec<Vec<f64>>> {
    if spec.k != vlm.k() || spec.feat_dim != vlm.feat_dim() {
        return Err(Error::Config(format!(
            "domain is {}x{} but the model is {}x{}",
            spec.k,
            spec.feat_dim,
            vlm.k(),
            vlm.feat_dim()
        )));
    }
    let mut rng = RngStream::derive(spec.seed, STREAM_PROTOTYPES);
    vlm.teacher_features()
        .iter()
        .map(|t| {
            let eps = sample_gaussian(&mut rng, t.len(), 0.0, spec.prototype_jitter)?;
            let p: Vec<f64> = t.iter().zip(&eps).map(|(a, b)| a + b).collect();
            normalize(&p)
        })
        .collect()
}

/// Rotates each prototype by `gap_rotation_deg` towards a seeded random
/// orthogonal direction, then adds `gap_shift` along one shared seeded unit
/// direction and renormalises. Zero gaps return the input unchanged.
pub fn shift_domain(prototypes: &[Vec<f64>], spec: &DomainSpec) -> Result<Vec<Vec<f64>>> {
    let mut out = prototypes.to_vec();
    if spec.gap_rotation_deg != 0.0 {
        let theta = spec.gap_rotation_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let mut rng = RngStream::derive(spec.seed, STREAM_ROTATION);
        for p in &mut out {
            let q = orthogonal_unit(&mut rng, p);
            *p = p.iter().zip(&q).map(|(a, b)| c * a + s * b).collect();
        }
    }
    if spec.gap_shift != 0.0 {
        let dim = prototypes.first().map_or(0, Vec::len);
        let dir = RngStream::derive(spec.seed, STREAM_SHIFT).unit_vector(dim);
        for p in &mut out {
            let moved: Vec<f64> = p.iter().zip(&dir).map(|(a, d)| a + spec.gap_shift * d).collect();
            *p = normalize(&moved)?;
        }
    }
    Ok(out)
}

/// Random unit vector orthogonal to the unit vector `p`.
fn orthogonal_unit(rng: &mut RngStream, p: &[f64]) -> Vec<f64> {
    loop {
        let r = rng.unit_vector(p.len());
        let rp = dot_unchecked(&r, p);
        let q: Vec<f64> = r.iter().zip(p).map(|(a, b)| a - rp * b).collect();
        if let Ok(u) = normalize(&q) {
            if crate::numerics::l2_norm(&q) > 1e-6 {
                return u;
            }
        }
    }
}

/// Seeded shuffle of `0..k`; the first `⌈k/2⌉` are base classes. Both
/// halves are returned sorted.
pub fn split_base_new(k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if k < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {k}")));
    }
    let mut idx: Vec<usize> = (0..k).collect();
    RngStream::derive(seed, STREAM_SPLIT).shuffle(&mut idx);
    let n_base = k.div_ceil(2);
    let mut base = idx[..n_base].to_vec();
    let mut new = idx[n_base..].to_vec();
    base.sort_unstable();
    new.sort_unstable();
    Ok((base, new))
}

fn draw(rng: &mut RngStream, proto: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let noise = sample_gaussian(rng, proto.len(), 0.0, sigma)?;
    let x: Vec<f64> = proto.iter().zip(&noise).map(|(a, b)| a + b).collect();
    normalize(&x)
}

/// `per_class` images for each listed class, class-major.
pub fn sample_images(
    prototypes: &[Vec<f64>],
    classes: &[usize],
    per_class: usize,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<Batch> {
    let mut features = Vec::with_capacity(classes.len() * per_class);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for &c in classes {
        for _ in 0..per_class {
            features.push(draw(rng, &prototypes[c], sigma)?);
            labels.push(c);
        }
    }
    Batch::new(features, labels)
}

/// The test split of the episode with this seed, drawn from `prototypes`.
///
/// Reusing the seed with shifted prototypes gives the same noise draws, so a
/// zero gap reproduces the episode's own test set.
pub fn sample_test_set(prototypes: &[Vec<f64>], spec: &DomainSpec, seed: u64) -> Result<Batch> {
    let all: Vec<usize> = (0..spec.k).collect();
    let mut rng = RngStream::derive(seed, STREAM_TEST);
    sample_images(prototypes, &all, TEST_PER_CLASS, spec.noise_sigma, &mut rng)
}

/// Few-shot episode: `shots` training images per base class and
/// [`TEST_PER_CLASS`] test images for every class.
pub fn sample_episode(prototypes: &[Vec<f64>], spec: &DomainSpec, shots: usize, seed: u64) -> Result<Episode> {
    spec.validate()?;
    if shots == 0 {
        return Err(Error::Parameter("shots must be >= 1".into()));
    }
    if prototypes.len() != spec.k {
        return Err(Error::Dimension(format!("{} prototypes for {} classes", prototypes.len(), spec.k)));
    }
    let (base, new) = split_base_new(spec.k, seed)?;
    let mut train_rng = RngStream::derive(seed, STREAM_TRAIN);
    let train = sample_images(prototypes, &base, shots, spec.noise_sigma, &mut train_rng)?;
    let test = sample_test_set(prototypes, spec, seed)?;
    Ok(Episode { train, test, base_classes: base, new_classes: new, shots })
}

/// Pre-trained and downstream prototypes for `spec`.
pub fn build_domains(vlm: &FrozenVlm, spec: &DomainSpec) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    spec.validate()?;
    let source = teacher_aligned_prototypes(vlm, spec)?;
    let downstream = shift_domain(&source, spec)?;
    Ok((source, downstream))
}

/// True when `base` and `new` partition `0..k`.
pub fn is_partition(base: &[usize], new: &[usize], k: usize) -> bool {
    let b: BTreeSet<_> = base.iter().collect();
    let n: BTreeSet<_> = new.iter().collect();
    b.len() == base.len() && n.len() == new.len() && b.is_disjoint(&n) && b.len() + n.len() == k && b.union(&n).all(|&&c| c < k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_norm;
    use crate::vlm::{zero_shot_probs, VlmSpec};

    fn zs_accuracy(vlm: &FrozenVlm, batch: &Batch) -> f64 {
        let hits = batch
            .features
            .iter()
            .zip(&batch.labels)
            .filter(|(x, &y)| zero_shot_probs(vlm, x).unwrap().argmax() == y)
            .count();
        hits as f64 / batch.len() as f64
    }

    #[test]
    fn exact_prototypes_give_perfect_teacher() {
        let vlm = FrozenVlm::random(VlmSpec::default()).unwrap();
        let spec = DomainSpec { prototype_jitter: 0.0, noise_sigma: 1e-9, gap_rotation_deg: 0.0, ..Default::default() };
        let protos = teacher_aligned_prototypes(&vlm, &spec).unwrap();
        let test = sample_test_set(&protos, &spec, 1).unwrap();
        assert_eq!(zs_accuracy(&vlm, &test), 1.0);
    }

    #[test]
    fn prototypes_are_deterministic() {
        let vlm = FrozenVlm::random(VlmSpec::default()).unwrap();
        let spec = DomainSpec::default();
        assert_eq!(teacher_aligned_prototypes(&vlm, &spec).unwrap(), teacher_aligned_prototypes(&vlm, &spec).unwrap());
        let bad = DomainSpec { k: 3, ..spec };
        assert!(matches!(teacher_aligned_prototypes(&vlm, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn default_domain_teacher_is_informative_but_imperfect() {
        let vlm = FrozenVlm::random(VlmSpec::default()).unwrap();
        let spec = DomainSpec::default();
        let (_, downstream) = build_domains(&vlm, &spec).unwrap();
        let mut rng = RngStream::new(77);
        let all: Vec<usize> = (0..10).collect();
        let batch = sample_images(&downstream, &all, 100, spec.noise_sigma, &mut rng).unwrap();
        let acc = zs_accuracy(&vlm, &batch);
        assert!(acc > 0.1 && acc < 1.0, "zero-shot accuracy {acc}");
    }

    #[test]
    fn zero_gap_is_identity() {
        let vlm = FrozenVlm::random(VlmSpec::default()).unwrap();
        let spec = DomainSpec { gap_rotation_deg: 0.0, gap_shift: 0.0, ..Default::default() };
        let protos = teacher_aligned_prototypes(&vlm, &spec).unwrap();
        assert_eq!(shift_domain(&protos, &spec).unwrap(), protos);
    }

    #[test]
    fn half_turn_negates_in_the_plane() {
        let spec = DomainSpec { k: 2, feat_dim: 2, gap_rotation_deg: 180.0, gap_shift: 0.0, ..Default::default() };
        let protos = vec![vec![0.6, 0.8], vec![-1.0, 0.0]];
        let out = shift_domain(&protos, &spec).unwrap();
        for (p, q) in protos.iter().zip(&out) {
            for (a, b) in p.iter().zip(q) {
                assert!((a + b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_moves_prototypes_monotonically() {
        let vlm = FrozenVlm::random(VlmSpec::default()).unwrap();
        let base = DomainSpec { gap_rotation_deg: 0.0, ..Default::default() };
        let protos = teacher_aligned_prototypes(&vlm, &base).unwrap();
        let mut last = f64::INFINITY;
        for deg in [0.0, 30.0, 60.0, 90.0] {
            let shifted = shift_domain(&protos, &base.with_gap(deg, 0.0)).unwrap();
            let mean: f64 =
                protos.iter().zip(&shifted).map(|(a, b)| dot_unchecked(a, b)).sum::<f64>() / protos.len() as f64;
            assert!(mean < last || deg == 0.0);
            assert!((mean - deg.to_radians().cos()).abs() < 1e-12);
            last = mean;
        }
    }

    #[test]
    fn teacher_accuracy_does_not_grow_with_rotation() {
        let vlm = FrozenVlm::random(VlmSpec::default()).unwrap();
        let spec = DomainSpec::default();
        let source = teacher_aligned_prototypes(&vlm, &spec).unwrap();
        let mut last = 1.0;
        for deg in [0.0, 15.0, 30.0, 45.0, 60.0, 90.0] {
            let target = shift_domain(&source, &spec.with_gap(deg, 0.0)).unwrap();
            let acc = zs_accuracy(&vlm, &sample_test_set(&target, &spec, 3).unwrap());
            assert!(acc <= last + 0.01, "{deg}: {acc} > {last}");
            last = acc;
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_base_new(2, 0).unwrap().0.len(), 1);
        for k in 2..30 {
            for seed in 0..5 {
                let (b, n) = split_base_new(k, seed).unwrap();
                assert_eq!(b.len(), k.div_ceil(2));
                assert!(is_partition(&b, &n, k));
                assert_eq!((b.clone(), n.clone()), split_base_new(k, seed).unwrap());
            }
        }
        assert!(split_base_new(1, 0).is_err());
    }

    #[test]
    fn episodes() {
        let vlm = FrozenVlm::random(VlmSpec::default()).unwrap();
        let spec = DomainSpec::default();
        let (_, downstream) = build_domains(&vlm, &spec).unwrap();
        let ep = sample_episode(&downstream, &spec, 1, 9).unwrap();
        assert_eq!(ep.train.len(), 5);
        assert_eq!(ep.test.len(), 1000);
        assert!(ep.train.labels.iter().all(|y| ep.base_classes.contains(y)));
        assert!(is_partition(&ep.base_classes, &ep.new_classes, 10));
        for x in ep.train.features.iter().chain(&ep.test.features) {
            assert!((l2_norm(x) - 1.0).abs() < 1e-12);
        }
        assert_eq!(ep, sample_episode(&downstream, &spec, 1, 9).unwrap());
        let ep4 = sample_episode(&downstream, &spec, 4, 9).unwrap();
        for c in &ep4.base_classes {
            assert_eq!(ep4.train.labels.iter().filter(|y| *y == c).count(), 4);
        }
        assert!(sample_episode(&downstream, &spec, 0, 9).is_err());
    }

    #[test]
    fn train_and_test_never_share_an_image() {
        let spec = DomainSpec { k: 3, feat_dim: 4, ..Default::default() };
        let protos = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
        for seed in 0..10 {
            let ep = sample_episode(&protos, &spec, 8, seed).unwrap();
            for a in &ep.train.features {
                assert!(ep.test.features.iter().all(|b| a != b));
            }
        }
    }
}
