//! Finite-difference self-check of every analytic gradient on random small
//! instances.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{self, Batch};
use crate::numerics::{finite_diff_grad, l2_norm, sample_gaussian, RngStream};
use crate::vlm::{CosineClassifier, FrozenVlm, PromptState, VlmSpec};

pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub case: usize,
    pub kind: String,
    pub params: usize,
    pub rel_err: f64,
    pub passed: bool,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = l2_norm(a).max(l2_norm(b));
    if scale == 0.0 {
        0.0
    } else {
        l2_norm(&diff) / scale
    }
}

fn step_for(x: &[f64]) -> f64 {
    1e-5 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

struct Instance {
    vlm: FrozenVlm,
    prompt: PromptState,
    classifier: CosineClassifier,
    batch: Batch,
    anchor: Vec<f64>,
}

fn instance(rng: &mut RngStream) -> Result<Instance> {
    let m = 1 + rng.below(4) as usize;
    let spec = VlmSpec {
        m,
        m_hand: rng.below(m as u64 + 1) as usize,
        tok_dim: 1 + rng.below(8) as usize,
        feat_dim: 2 + rng.below(15) as usize,
        k: 2 + rng.below(4) as usize,
        // Log-uniform in [0.05, 1]: sharp enough to matter, not saturated.
        tau: (0.05f64.ln() * (1.0 - rng.next_f64())).exp(),
        seed: rng.next_u64(),
    };
    let vlm = FrozenVlm::random(spec)?;
    let n_ctx = spec.m * spec.tok_dim;
    let prompt = PromptState::new(spec.m, spec.tok_dim, sample_gaussian(rng, n_ctx, 0.0, 1.0)?)?;
    let classifier = CosineClassifier::new(spec.k, spec.feat_dim, sample_gaussian(rng, spec.k * spec.feat_dim, 0.0, 1.0)?)?;
    let n = 1 + rng.below(6) as usize;
    let features = (0..n).map(|_| sample_gaussian(rng, spec.feat_dim, 0.0, 1.0)).collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|_| rng.below(spec.k as u64) as usize).collect();
    let anchor = sample_gaussian(rng, n_ctx, 0.0, 1.0)?;
    Ok(Instance { vlm, prompt, classifier, batch: Batch::new(features, labels)?, anchor })
}

/// Runs `cases` random instances, checking CE, KL, the ℓ2 regulariser and
/// both cosine-classifier gradients. `tamper` may modify each analytic
/// gradient before comparison, which lets tests inject faults.
pub fn run_gradcheck_with<F>(seed: u64, cases: usize, tol: f64, mut tamper: F) -> Result<Vec<GradCheckCase>>
where
    F: FnMut(&str, &mut Vec<f64>),
{
    let mut rng = RngStream::new(seed);
    let mut out = Vec::with_capacity(cases * 5);
    for case in 0..cases {
        let inst = instance(&mut rng)?;
        let (vlm, batch) = (&inst.vlm, &inst.batch);
        let v = inst.prompt.as_flat();
        let rebuild = |x: &[f64]| PromptState::new(inst.prompt.len(), inst.prompt.tok_dim(), x.to_vec());

        let pair = losses::grad_pair(vlm, &inst.prompt, batch)?;
        let h = step_for(v);
        let fd_ce = finite_diff_grad(|x| losses::mean_ce(vlm, &rebuild(x)?, batch), v, h)?;
        let fd_kl = finite_diff_grad(|x| losses::mean_kl(vlm, &rebuild(x)?, batch), v, h)?;

        let alpha = 0.01;
        let reg = losses::grad_l2reg(v, &inst.anchor, alpha)?;
        let fd_reg = finite_diff_grad(|x| losses::l2reg_loss(x, &inst.anchor, alpha), v, h)?;

        let cls = &inst.classifier;
        let (k, d) = (cls.k(), cls.feat_dim());
        let cpair = losses::classifier_grad_pair(vlm, cls, batch)?;
        let w = cls.as_flat();
        let hc = step_for(w);
        let at = |x: &[f64]| CosineClassifier::new(k, d, x.to_vec());
        let fd_cce = finite_diff_grad(|x| Ok(losses::classifier_losses(vlm, &at(x)?, batch)?.0), w, hc)?;
        let fd_ckl = finite_diff_grad(|x| Ok(losses::classifier_losses(vlm, &at(x)?, batch)?.1), w, hc)?;

        for (kind, mut analytic, numeric) in [
            ("ce", pair.g_ce, fd_ce),
            ("kl", pair.g_kl, fd_kl),
            ("l2reg", reg, fd_reg),
            ("classifier_ce", cpair.g_ce, fd_cce),
            ("classifier_kl", cpair.g_kl, fd_ckl),
        ] {
            tamper(kind, &mut analytic);
            let rel_err = relative_error(&analytic, &numeric);
            out.push(GradCheckCase {
                case,
                kind: kind.to_string(),
                params: analytic.len(),
                rel_err,
                passed: rel_err <= tol,
            });
        }
    }
    Ok(out)
}

pub fn run_gradcheck(seed: u64, cases: usize, tol: f64) -> Result<Vec<GradCheckCase>> {
    run_gradcheck_with(seed, cases, tol, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes_and_is_reproducible() {
        let a = run_gradcheck(3, 10, DEFAULT_TOLERANCE).unwrap();
        assert!(a.iter().all(|c| c.passed), "{:?}", a.iter().filter(|c| !c.passed).collect::<Vec<_>>());
        assert_eq!(a, run_gradcheck(3, 10, DEFAULT_TOLERANCE).unwrap());
    }

    #[test]
    fn perturbed_gradient_is_detected() {
        let cases = run_gradcheck_with(3, 3, DEFAULT_TOLERANCE, |kind, g| {
            if kind == "kl" {
                g[0] += 1e-3 * (1.0 + g[0].abs());
            }
        })
        .unwrap();
        assert!(cases.iter().filter(|c| c.kind == "kl").all(|c| !c.passed));
        assert!(cases.iter().filter(|c| c.kind == "ce").all(|c| c.passed));
    }
}
