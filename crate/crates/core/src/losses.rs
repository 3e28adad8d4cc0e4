//! Cross-entropy and teacher-KL losses with hand-derived gradients.
//!
//! Both losses are batch means. The KL term treats the teacher
//! probabilities as constants. Gradients flow
//! softmax → cosine → L2 normalisation → tanh → affine, ending at the
//! flattened context vectors (prompt mode) or at the classifier rows
//! (cosine-classifier mode).

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{cosine_sim, dot_unchecked, l2_norm, softmax, ProbVector};
use crate::vlm::{zero_shot_probs, CosineClassifier, FrozenVlm, PromptState};

/// Labelled image features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        check_len("batch features/labels", features.len(), labels.len())?;
        if features.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, k: usize, feat_dim: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        check_len("batch features/labels", self.features.len(), self.labels.len())?;
        for (x, &y) in self.features.iter().zip(&self.labels) {
            check_len("image feature", x.len(), feat_dim)?;
            if y >= k {
                return Err(Error::Parameter(format!("label {y} out of range for {k} classes")));
            }
        }
        Ok(())
    }

    /// Sub-batch with the given row indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// `G_ce` and `G_kl` over the same flattened parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradPair {
    pub g_ce: Vec<f64>,
    pub g_kl: Vec<f64>,
}

impl GradPair {
    pub fn new(g_ce: Vec<f64>, g_kl: Vec<f64>) -> Result<Self> {
        check_len("grad pair", g_ce.len(), g_kl.len())?;
        Ok(Self { g_ce, g_kl })
    }
}

/// Mean losses and their gradients from one forward pass.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub grads: GradPair,
}

/// `−log p[y]`.
pub fn ce_loss(p: &ProbVector, y: usize) -> Result<f64> {
    if y >= p.len() {
        return Err(Error::Parameter(format!("label {y} out of range for {} classes", p.len())));
    }
    if p[y] == 0.0 {
        return Err(Error::InfiniteLoss(format!("p[{y}] = 0")));
    }
    Ok(-p[y].ln())
}

/// `Σ q_i · log(q_i / p_i)` with `0 · log 0 = 0`.
pub fn kl_loss(p: &ProbVector, p_zs: &ProbVector) -> Result<f64> {
    check_len("kl", p.len(), p_zs.len())?;
    let mut total = 0.0;
    for (pi, qi) in p.as_slice().iter().zip(p_zs.as_slice()) {
        if *qi == 0.0 {
            continue;
        }
        if *pi == 0.0 {
            return Err(Error::InfiniteLoss("student assigns zero mass where the teacher does not".into()));
        }
        total += qi * (qi / pi).ln();
    }
    // Rounding can leave a tiny negative value at p == p_zs.
    Ok(total.max(0.0))
}

/// Gradient of `alpha · ‖v − v_zs‖₂`, with the zero subgradient at `v = v_zs`.
pub fn grad_l2reg(params: &[f64], params_zs: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_len("l2 reg", params.len(), params_zs.len())?;
    let diff: Vec<f64> = params.iter().zip(params_zs).map(|(a, b)| a - b).collect();
    let n = l2_norm(&diff);
    if n == 0.0 || alpha == 0.0 {
        return Ok(vec![0.0; params.len()]);
    }
    Ok(diff.iter().map(|d| alpha * d / n).collect())
}

/// `alpha · ‖v − v_zs‖₂`.
pub fn l2reg_loss(params: &[f64], params_zs: &[f64], alpha: f64) -> Result<f64> {
    check_len("l2 reg", params.len(), params_zs.len())?;
    let diff: Vec<f64> = params.iter().zip(params_zs).map(|(a, b)| a - b).collect();
    Ok(alpha * l2_norm(&diff))
}

/// Teacher probabilities for every row of `batch`.
pub fn teacher_probs(vlm: &FrozenVlm, batch: &Batch) -> Result<Vec<ProbVector>> {
    batch.features.iter().map(|x| zero_shot_probs(vlm, x)).collect()
}

/// Per-class upstream gradients `∂L/∂w_i` for CE and KL, plus mean losses.
struct Upstream {
    ce: Vec<Vec<f64>>,
    kl: Vec<Vec<f64>>,
    loss_ce: f64,
    loss_kl: f64,
}

fn upstream(features: &[Vec<f64>], batch: &Batch, teacher: &[ProbVector], tau: f64) -> Result<Upstream> {
    let k = features.len();
    let dim = features[0].len();
    check_len("teacher probabilities", teacher.len(), batch.len())?;
    let inv_n = 1.0 / batch.len() as f64;
    let mut up = Upstream { ce: vec![vec![0.0; dim]; k], kl: vec![vec![0.0; dim]; k], loss_ce: 0.0, loss_kl: 0.0 };
    for ((x, &y), q) in batch.features.iter().zip(&batch.labels).zip(teacher) {
        let xn = l2_norm(x);
        if xn == 0.0 {
            return Err(Error::Degenerate("zero image feature".into()));
        }
        let logits = features.iter().map(|w| cosine_sim(w, x)).collect::<Result<Vec<_>>>()?;
        let p = softmax(&logits, tau)?;
        up.loss_ce += ce_loss(&p, y)? * inv_n;
        up.loss_kl += kl_loss(&p, q)? * inv_n;
        for i in 0..k {
            let onehot = if i == y { 1.0 } else { 0.0 };
            let g_ce = (p[i] - onehot) / tau * inv_n / xn;
            let g_kl = (p[i] - q[i]) / tau * inv_n / xn;
            for ((a, b), xv) in up.ce[i].iter_mut().zip(up.kl[i].iter_mut()).zip(x) {
                *a += g_ce * xv;
                *b += g_kl * xv;
            }
        }
    }
    Ok(up)
}

/// `(a − (a·w)w) / norm`: pulls a gradient back through `w = u / ‖u‖`.
fn through_normalize(a: &[f64], w: &[f64], norm: f64) -> Vec<f64> {
    let aw = dot_unchecked(a, w);
    a.iter().zip(w).map(|(ai, wi)| (ai - aw * wi) / norm).collect()
}

fn prompt_backprop(vlm: &FrozenVlm, fwd: &crate::vlm::PromptForward, per_class: &[Vec<f64>]) -> Vec<f64> {
    let mut delta = vec![0.0; vlm.feat_dim()];
    for (i, a) in per_class.iter().enumerate() {
        let du = through_normalize(a, &fwd.features[i], fwd.act_norms[i]);
        for ((d, g), u) in delta.iter_mut().zip(&du).zip(&fwd.activations[i]) {
            *d += g * (1.0 - u * u);
        }
    }
    let mut out = vec![0.0; vlm.spec().context_dim()];
    vlm.backprop_context(&delta, &mut out);
    out
}

fn check_batch(vlm: &FrozenVlm, batch: &Batch) -> Result<()> {
    batch.validate(vlm.k(), vlm.feat_dim())
}

/// Losses and `(G_ce, G_kl)` w.r.t. the flattened prompt, given precomputed
/// teacher probabilities for each batch row.
pub fn prompt_loss_eval(
    vlm: &FrozenVlm,
    prompt: &PromptState,
    batch: &Batch,
    teacher: &[ProbVector],
) -> Result<LossEval> {
    check_batch(vlm, batch)?;
    let fwd = vlm.forward(prompt)?;
    let up = upstream(&fwd.features, batch, teacher, vlm.tau())?;
    Ok(LossEval {
        loss_ce: up.loss_ce,
        loss_kl: up.loss_kl,
        grads: GradPair { g_ce: prompt_backprop(vlm, &fwd, &up.ce), g_kl: prompt_backprop(vlm, &fwd, &up.kl) },
    })
}

/// `(G_ce, G_kl)` on the same batch from a single forward pass.
pub fn grad_pair(vlm: &FrozenVlm, prompt: &PromptState, batch: &Batch) -> Result<GradPair> {
    check_batch(vlm, batch)?;
    let teacher = teacher_probs(vlm, batch)?;
    Ok(prompt_loss_eval(vlm, prompt, batch, &teacher)?.grads)
}

pub fn grad_ce(vlm: &FrozenVlm, prompt: &PromptState, batch: &Batch) -> Result<Vec<f64>> {
    Ok(grad_pair(vlm, prompt, batch)?.g_ce)
}

pub fn grad_kl(vlm: &FrozenVlm, prompt: &PromptState, batch: &Batch) -> Result<Vec<f64>> {
    Ok(grad_pair(vlm, prompt, batch)?.g_kl)
}

/// Gradient of `w_ce · L_ce + w_kl · L_kl`, backpropagated once from the
/// combined upstream signal rather than by summing the two gradients.
pub fn grad_combined(vlm: &FrozenVlm, prompt: &PromptState, batch: &Batch, w_ce: f64, w_kl: f64) -> Result<Vec<f64>> {
    check_batch(vlm, batch)?;
    let teacher = teacher_probs(vlm, batch)?;
    let fwd = vlm.forward(prompt)?;
    let up = upstream(&fwd.features, batch, &teacher, vlm.tau())?;
    let combined: Vec<Vec<f64>> = up
        .ce
        .iter()
        .zip(&up.kl)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| w_ce * x + w_kl * y).collect())
        .collect();
    Ok(prompt_backprop(vlm, &fwd, &combined))
}

/// Mean CE of the prompt model over `batch`.
pub fn mean_ce(vlm: &FrozenVlm, prompt: &PromptState, batch: &Batch) -> Result<f64> {
    check_batch(vlm, batch)?;
    let feats = crate::vlm::class_features(vlm, prompt)?;
    let mut total = 0.0;
    for (x, &y) in batch.features.iter().zip(&batch.labels) {
        total += ce_loss(&crate::vlm::probs_from_features(&feats, x, vlm.tau())?, y)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean KL to the zero-shot teacher of the prompt model over `batch`.
pub fn mean_kl(vlm: &FrozenVlm, prompt: &PromptState, batch: &Batch) -> Result<f64> {
    check_batch(vlm, batch)?;
    let feats = crate::vlm::class_features(vlm, prompt)?;
    let mut total = 0.0;
    for x in &batch.features {
        let p = crate::vlm::probs_from_features(&feats, x, vlm.tau())?;
        total += kl_loss(&p, &zero_shot_probs(vlm, x)?)?;
    }
    Ok(total / batch.len() as f64)
}

/// Losses and `(G_ce, G_kl)` w.r.t. the flattened classifier rows.
pub fn classifier_loss_eval(
    cls: &CosineClassifier,
    tau: f64,
    batch: &Batch,
    teacher: &[ProbVector],
) -> Result<LossEval> {
    batch.validate(cls.k(), cls.feat_dim())?;
    let mut rows = Vec::with_capacity(cls.k());
    let mut norms = Vec::with_capacity(cls.k());
    for i in 0..cls.k() {
        let r = cls.row(i);
        let n = l2_norm(r);
        if n == 0.0 {
            return Err(Error::Degenerate(format!("classifier row {i} is zero")));
        }
        rows.push(r.iter().map(|x| x / n).collect::<Vec<f64>>());
        norms.push(n);
    }
    let raw: Vec<Vec<f64>> = (0..cls.k()).map(|i| cls.row(i).to_vec()).collect();
    let up = upstream(&raw, batch, teacher, tau)?;
    let pull = |per_class: &[Vec<f64>]| -> Vec<f64> {
        per_class
            .iter()
            .enumerate()
            .flat_map(|(i, a)| through_normalize(a, &rows[i], norms[i]))
            .collect()
    };
    Ok(LossEval { loss_ce: up.loss_ce, loss_kl: up.loss_kl, grads: GradPair { g_ce: pull(&up.ce), g_kl: pull(&up.kl) } })
}

pub fn classifier_grad_pair(vlm: &FrozenVlm, cls: &CosineClassifier, batch: &Batch) -> Result<GradPair> {
    let teacher = teacher_probs(vlm, batch)?;
    Ok(classifier_loss_eval(cls, vlm.tau(), batch, &teacher)?.grads)
}

/// Mean CE and mean teacher-KL of a cosine classifier over `batch`.
pub fn classifier_losses(vlm: &FrozenVlm, cls: &CosineClassifier, batch: &Batch) -> Result<(f64, f64)> {
    batch.validate(cls.k(), cls.feat_dim())?;
    let (mut ce, mut kl) = (0.0, 0.0);
    for (x, &y) in batch.features.iter().zip(&batch.labels) {
        let p = crate::vlm::cosine_classifier_probs(cls, x, vlm.tau())?;
        ce += ce_loss(&p, y)?;
        kl += kl_loss(&p, &zero_shot_probs(vlm, x)?)?;
    }
    let n = batch.len() as f64;
    Ok((ce / n, kl / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, sample_gaussian, RngStream};
    use crate::vlm::{init_prompt, VlmSpec};
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        l2_norm(&diff) / l2_norm(b).max(l2_norm(a)).max(1e-300)
    }

    fn instance(seed: u64) -> (FrozenVlm, PromptState, Batch) {
        let spec = VlmSpec { m: 3, m_hand: 2, tok_dim: 4, feat_dim: 6, k: 4, tau: 0.3, seed };
        let vlm = FrozenVlm::random(spec).unwrap();
        let mut rng = RngStream::derive(seed, 1);
        let v = sample_gaussian(&mut rng, 12, 0.0, 1.0).unwrap();
        let prompt = PromptState::new(3, 4, v).unwrap();
        let features = (0..5).map(|_| sample_gaussian(&mut rng, 6, 0.0, 1.0).unwrap()).collect();
        let labels = (0..5).map(|_| rng.below(4) as usize).collect();
        (vlm, prompt, Batch::new(features, labels).unwrap())
    }

    fn with_flat(prompt: &PromptState, flat: &[f64]) -> PromptState {
        PromptState::new(prompt.len(), prompt.tok_dim(), flat.to_vec()).unwrap()
    }

    #[test]
    fn ce_examples() {
        assert!((ce_loss(&pv(&[0.5, 0.5]), 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(ce_loss(&pv(&[0.0, 1.0]), 1).unwrap(), 0.0);
        assert!((ce_loss(&pv(&[0.2, 0.3, 0.5]), 2).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(ce_loss(&pv(&[0.0, 1.0]), 0), Err(Error::InfiniteLoss(_))));
    }

    #[test]
    fn kl_examples() {
        let p = pv(&[0.1, 0.2, 0.7]);
        assert_eq!(kl_loss(&p, &p).unwrap(), 0.0);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_loss(&pv(&[0.25, 0.75]), &pv(&[0.5, 0.5])).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.1438).abs() < 1e-4);
        assert_eq!(kl_loss(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])).unwrap(), 2f64.ln());
        assert!(matches!(kl_loss(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])), Err(Error::InfiniteLoss(_))));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in 0..20 {
            let (vlm, prompt, batch) = instance(seed);
            let g = grad_pair(&vlm, &prompt, &batch).unwrap();
            let h = 1e-5 * (1.0 + prompt.as_flat().iter().fold(0.0f64, |m, x| m.max(x.abs())));
            let fd_ce =
                finite_diff_grad(|v| mean_ce(&vlm, &with_flat(&prompt, v), &batch), prompt.as_flat(), h).unwrap();
            let fd_kl =
                finite_diff_grad(|v| mean_kl(&vlm, &with_flat(&prompt, v), &batch), prompt.as_flat(), h).unwrap();
            assert!(rel_err(&g.g_ce, &fd_ce) < 1e-6, "seed {seed}: ce {}", rel_err(&g.g_ce, &fd_ce));
            assert!(rel_err(&g.g_kl, &fd_kl) < 1e-6, "seed {seed}: kl {}", rel_err(&g.g_kl, &fd_kl));
            assert_eq!(grad_ce(&vlm, &prompt, &batch).unwrap(), g.g_ce);
            assert_eq!(grad_kl(&vlm, &prompt, &batch).unwrap(), g.g_kl);
        }
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        for seed in 0..20 {
            let (vlm, _, batch) = instance(seed);
            let mut rng = RngStream::derive(seed, 2);
            let w = sample_gaussian(&mut rng, 24, 0.0, 1.0).unwrap();
            let cls = CosineClassifier::new(4, 6, w).unwrap();
            let g = classifier_grad_pair(&vlm, &cls, &batch).unwrap();
            let h = 1e-5 * (1.0 + cls.as_flat().iter().fold(0.0f64, |m, x| m.max(x.abs())));
            let at = |v: &[f64]| CosineClassifier::new(4, 6, v.to_vec()).unwrap();
            let fd_ce = finite_diff_grad(|v| Ok(classifier_losses(&vlm, &at(v), &batch)?.0), cls.as_flat(), h).unwrap();
            let fd_kl = finite_diff_grad(|v| Ok(classifier_losses(&vlm, &at(v), &batch)?.1), cls.as_flat(), h).unwrap();
            assert!(rel_err(&g.g_ce, &fd_ce) < 1e-6);
            assert!(rel_err(&g.g_kl, &fd_kl) < 1e-6);
        }
    }

    #[test]
    fn l2reg_gradient() {
        let v = [1.0, 2.0, 3.0];
        assert_eq!(grad_l2reg(&v, &v, 0.01).unwrap(), vec![0.0; 3]);
        assert_eq!(grad_l2reg(&v, &[0.0, 0.0, 0.0], 0.0).unwrap(), vec![0.0; 3]);
        let zs = [0.5, -1.0, 2.0];
        let g = grad_l2reg(&v, &zs, 0.01).unwrap();
        let fd = finite_diff_grad(|x| l2reg_loss(x, &zs, 0.01), &v, 1e-5).unwrap();
        assert!(rel_err(&g, &fd) < 1e-6);
    }

    #[test]
    fn saturated_batch_has_flat_gradient() {
        // Each image equals its class's teacher feature at a sharp temperature.
        let vlm = FrozenVlm::random(VlmSpec { tau: 1e-3, k: 4, ..VlmSpec::default() }).unwrap();
        let feats = vlm.teacher_features().to_vec();
        let batch = Batch::new(feats, vec![0, 1, 2, 3]).unwrap();
        let g = grad_ce(&vlm, &init_prompt(&vlm), &batch).unwrap();
        assert!(l2_norm(&g) < 1e-10, "{}", l2_norm(&g));
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let (vlm, prompt, batch) = instance(4);
        let mut dup = batch.clone();
        dup.features.extend(batch.features.clone());
        dup.labels.extend(batch.labels.clone());
        let a = grad_pair(&vlm, &prompt, &batch).unwrap();
        let b = grad_pair(&vlm, &prompt, &dup).unwrap();
        assert!(rel_err(&a.g_ce, &b.g_ce) < 1e-12);
        assert!(rel_err(&a.g_kl, &b.g_kl) < 1e-12);

        let one = batch.select(&[2]);
        let rep = batch.select(&[2, 2, 2]);
        let a = grad_kl(&vlm, &prompt, &one).unwrap();
        let b = grad_kl(&vlm, &prompt, &rep).unwrap();
        assert!(rel_err(&a, &b) < 1e-12);
    }

    #[test]
    fn batch_gradient_is_mean_of_example_gradients() {
        let (vlm, prompt, batch) = instance(8);
        let full = grad_pair(&vlm, &prompt, &batch).unwrap();
        let mut mean_ce = vec![0.0; full.g_ce.len()];
        let mut mean_kl = vec![0.0; full.g_ce.len()];
        for i in 0..batch.len() {
            let g = grad_pair(&vlm, &prompt, &batch.select(&[i])).unwrap();
            for j in 0..mean_ce.len() {
                mean_ce[j] += g.g_ce[j] / batch.len() as f64;
                mean_kl[j] += g.g_kl[j] / batch.len() as f64;
            }
        }
        for j in 0..mean_ce.len() {
            assert!((mean_ce[j] - full.g_ce[j]).abs() < 1e-12);
            assert!((mean_kl[j] - full.g_kl[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_prompt_has_zero_kl_gradient() {
        let (vlm, _, batch) = instance(5);
        let g = grad_pair(&vlm, &init_prompt(&vlm), &batch).unwrap();
        assert!(l2_norm(&g.g_kl) < 1e-10);
        assert!(l2_norm(&g.g_ce) > 1e-6);
        assert_eq!(mean_kl(&vlm, &init_prompt(&vlm), &batch).unwrap(), 0.0);
    }

    #[test]
    fn combined_gradient_is_sum() {
        let (vlm, prompt, batch) = instance(6);
        let g = grad_pair(&vlm, &prompt, &batch).unwrap();
        let c = grad_combined(&vlm, &prompt, &batch, 1.0, 1.0).unwrap();
        for ((c, a), b) in c.iter().zip(&g.g_ce).zip(&g.g_kl) {
            assert!((c - (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_invalid_batches_rejected() {
        assert!(Batch::new(vec![], vec![]).is_err());
        let (vlm, prompt, mut batch) = instance(1);
        batch.labels[0] = 99;
        assert!(grad_pair(&vlm, &prompt, &batch).is_err());
        let empty = Batch { features: vec![], labels: vec![] };
        assert!(grad_pair(&vlm, &prompt, &empty).is_err());
    }

    fn prob_vec(n: usize) -> impl Strategy<Value = ProbVector> {
        proptest::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            let mut p: Vec<f64> = v.iter().map(|x| x / s).collect();
            let rest: f64 = p[1..].iter().sum();
            p[0] = 1.0 - rest;
            ProbVector::new(p).unwrap()
        })
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative((p, q) in (2usize..8).prop_flat_map(|n| (prob_vec(n), prob_vec(n)))) {
            let d = kl_loss(&p, &q).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(kl_loss(&q, &q).unwrap(), 0.0);
            if d < 1e-12 {
                for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                    prop_assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }
}
