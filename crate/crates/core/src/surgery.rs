//! Update rules that turn `(G_ce, G_kl)` into a descent direction.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::losses::GradPair;
use crate::numerics::{angle_deg, dot_unchecked, l2_norm};

/// Teacher gradients with a norm below this carry no direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// How raw gradients become an update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UpdateRule {
    /// Plain cross-entropy descent.
    Ce,
    /// `G_ce`, with the conflicting component along `G_kl` scaled out by `lambda`.
    Prograd { lambda: f64 },
    /// `G_ce + G_kl`.
    Kd,
    /// Alternating mutual projection.
    Gm,
    /// `G_ce` plus the gradient of `alpha · ‖v − v_zs‖₂`.
    L2reg { alpha: f64 },
}

impl UpdateRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            UpdateRule::Prograd { lambda } if !(0.0..=1.0).contains(&lambda) => {
                Err(Error::Parameter(format!("lambda must lie in [0, 1], got {lambda}")))
            }
            UpdateRule::L2reg { alpha } if !(alpha >= 0.0) || !alpha.is_finite() => {
                Err(Error::Parameter(format!("alpha must be >= 0, got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            UpdateRule::Ce => "CE",
            UpdateRule::Prograd { .. } => "PROGRAD",
            UpdateRule::Kd => "KD",
            UpdateRule::Gm => "GM",
            UpdateRule::L2reg { .. } => "L2REG",
        }
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            UpdateRule::Prograd { lambda } => lambda,
            _ => 0.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        match *self {
            UpdateRule::L2reg { alpha } => alpha,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Branch {
    Aligned,
    Conflict,
    Passthrough,
}

impl Branch {
    /// Classifies a gradient pair by the sign of `G_ce · G_kl`.
    pub fn classify(dot_ce_kl: f64, kl_norm: f64) -> Self {
        if dot_ce_kl >= 0.0 {
            Branch::Aligned
        } else if kl_norm < DEGENERATE_NORM {
            Branch::Passthrough
        } else {
            Branch::Conflict
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Aligned => "ALIGNED",
            Branch::Conflict => "CONFLICT",
            Branch::Passthrough => "PASSTHROUGH",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurgeryOutcome {
    pub direction: Vec<f64>,
    pub branch: Branch,
    pub dot_ce_kl: f64,
    /// Angle between `G_ce` and `G_kl`; 90 when either is exactly zero.
    pub angle_deg: f64,
}

fn trace_angle(a: &[f64], b: &[f64]) -> f64 {
    angle_deg(a, b).unwrap_or(90.0)
}

/// `target − coef · along`; returns `target` unchanged when `coef` is zero.
fn remove_component(target: &[f64], along: &[f64], coef: f64) -> Vec<f64> {
    if coef == 0.0 {
        return target.to_vec();
    }
    target.iter().zip(along).map(|(t, a)| t - coef * a).collect()
}

/// The prompt-aligned update: `G_ce` if it does not conflict with `G_kl`,
/// otherwise `G_ce − λ · (G_ce·G_kl / ‖G_kl‖²) · G_kl`.
pub fn prograd(g_ce: &[f64], g_kl: &[f64], lambda: f64) -> Result<SurgeryOutcome> {
    check_len("prograd", g_ce.len(), g_kl.len())?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let dot = dot_unchecked(g_ce, g_kl);
    let kl_norm = l2_norm(g_kl);
    let branch = Branch::classify(dot, kl_norm);
    let direction = match branch {
        Branch::Aligned | Branch::Passthrough => g_ce.to_vec(),
        Branch::Conflict => remove_component(g_ce, g_kl, lambda * (dot / (kl_norm * kl_norm))),
    };
    Ok(SurgeryOutcome { direction, branch, dot_ce_kl: dot, angle_deg: trace_angle(g_ce, g_kl) })
}

/// Knowledge-distillation direction `G_ce + G_kl`.
pub fn kd_grad(g: &GradPair) -> Vec<f64> {
    g.g_ce.iter().zip(&g.g_kl).map(|(a, b)| a + b).collect()
}

/// Gradient matching, alternating by step parity. Even steps descend on
/// `G_ce` (projected off `G_kl` on conflict), odd steps on `G_kl`
/// (projected off `G_ce` on conflict).
pub fn gm_grad(g: &GradPair, step_index: usize) -> Vec<f64> {
    let (src, other) = if step_index.is_multiple_of(2) { (&g.g_ce, &g.g_kl) } else { (&g.g_kl, &g.g_ce) };
    let dot = dot_unchecked(src, other);
    let n = l2_norm(other);
    if dot >= 0.0 || n < DEGENERATE_NORM {
        return src.clone();
    }
    remove_component(src, other, dot / (n * n))
}

/// Dispatches `rule`. `g_reg` must be given exactly when the rule is `L2reg`.
pub fn apply_rule(rule: &UpdateRule, g: &GradPair, g_reg: Option<&[f64]>, step_index: usize) -> Result<SurgeryOutcome> {
    rule.validate()?;
    check_len("grad pair", g.g_ce.len(), g.g_kl.len())?;
    match (rule, g_reg) {
        (UpdateRule::L2reg { .. }, None) => {
            return Err(Error::Config("L2REG needs the regulariser gradient".into()));
        }
        (UpdateRule::L2reg { .. }, Some(r)) => check_len("regulariser gradient", r.len(), g.g_ce.len())?,
        (_, Some(_)) => return Err(Error::Config(format!("{} takes no regulariser gradient", rule.tag()))),
        _ => {}
    }
    if let UpdateRule::Prograd { lambda } = *rule {
        return prograd(&g.g_ce, &g.g_kl, lambda);
    }
    let dot = dot_unchecked(&g.g_ce, &g.g_kl);
    let branch = Branch::classify(dot, l2_norm(&g.g_kl));
    let direction = match rule {
        UpdateRule::Ce => g.g_ce.clone(),
        UpdateRule::Kd => kd_grad(g),
        UpdateRule::Gm => gm_grad(g, step_index),
        UpdateRule::L2reg { .. } => {
            let r = g_reg.expect("checked above");
            g.g_ce.iter().zip(r).map(|(a, b)| a + b).collect()
        }
        UpdateRule::Prograd { .. } => unreachable!(),
    };
    Ok(SurgeryOutcome { direction, branch, dot_ce_kl: dot, angle_deg: trace_angle(&g.g_ce, &g.g_kl) })
}
