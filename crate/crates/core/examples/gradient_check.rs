//! Compares every analytic gradient against central finite differences.

use gradalign::harness::gradcheck::{run_gradcheck, DEFAULT_TOLERANCE};

fn main() -> gradalign::Result<()> {
    let cases = run_gradcheck(1, 20, DEFAULT_TOLERANCE)?;
    for kind in ["ce", "kl", "l2reg", "classifier_ce", "classifier_kl"] {
        let errs: Vec<f64> = cases.iter().filter(|c| c.kind == kind).map(|c| c.rel_err).collect();
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        println!("{kind:<14} {} cases, worst relative error {worst:.2e}", errs.len());
    }
    let failed = cases.iter().filter(|c| !c.passed).count();
    println!("{failed} failures at tolerance {DEFAULT_TOLERANCE:e}");
    Ok(())
}
