//! The projection rule on hand-picked gradient pairs, next to the
//! competing update rules.

use gradalign::losses::GradPair;
use gradalign::surgery::{apply_rule, prograd, UpdateRule};

fn main() -> gradalign::Result<()> {
    let g_kl = [0.0, 1.0];
    for g_ce in [[1.0, 0.5], [1.0, -1.0], [-0.2, -1.0]] {
        for lambda in [0.0, 0.5, 1.0] {
            let o = prograd(&g_ce, &g_kl, lambda)?;
            println!(
                "g_ce={g_ce:?} λ={lambda:.1}: {:<9} angle {:6.1}° -> {:?}",
                o.branch.as_str(),
                o.angle_deg,
                o.direction
            );
        }
    }

    let pair = GradPair::new(vec![1.0, -1.0], vec![0.0, 1.0])?;
    let anchor_offset = [0.3, -0.4];
    for rule in [UpdateRule::Ce, UpdateRule::Kd, UpdateRule::Gm, UpdateRule::L2reg { alpha: 0.01 }] {
        let reg = gradalign::losses::grad_l2reg(&anchor_offset, &[0.0, 0.0], rule.alpha())?;
        let g_reg = matches!(rule, UpdateRule::L2reg { .. }).then_some(reg.as_slice());
        for step in 0..2 {
            let o = apply_rule(&rule, &pair, g_reg, step)?;
            println!("{:<6} step {step}: {:?}", rule.tag(), o.direction);
        }
    }
    Ok(())
}
