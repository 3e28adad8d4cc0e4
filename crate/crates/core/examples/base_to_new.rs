//! Base-to-new protocol over a handful of seeds, with a sign test on the
//! harmonic mean.

use gradalign::harness::{cmd_base2new, sign_test, ExperimentConfig, RunOptions};
use gradalign::surgery::UpdateRule;

fn main() -> gradalign::Result<()> {
    let out = std::env::temp_dir().join("gradalign-base-to-new");
    let cfg = ExperimentConfig {
        experiment: "base_to_new_example".into(),
        rules: vec![UpdateRule::Ce, UpdateRule::Prograd { lambda: 1.0 }],
        shots: vec![1],
        seeds: (1..=12).collect(),
        epochs: Some(50),
        lr0: 0.1,
        ..Default::default()
    };
    let report = cmd_base2new(&cfg, &RunOptions { out_dir: out.clone(), threads: 4, plot: false })?;
    for a in &report.aggregates {
        println!(
            "{:<8} base {:.3}  new {:.3} ± {:.3}  HM {:.3}",
            a.rule, a.acc_base_mean, a.acc_new_mean, a.acc_new_ci95, a.harmonic_mean_mean
        );
    }
    let hm = |rule: &str| report.rows.iter().filter(|r| r.rule == rule).map(|r| r.harmonic_mean).collect::<Vec<_>>();
    let (wins, losses, p) = sign_test(&hm("PROGRAD"), &hm("CE"));
    println!("ProGrad beats CE on HM in {wins} seeds, loses {losses}, p = {p:.3}");
    println!("files in {}", out.display());
    Ok(())
}
