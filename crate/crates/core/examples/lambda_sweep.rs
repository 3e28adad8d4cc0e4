//! Sweeps the projection strength, with plain CE as the reference.

use gradalign::harness::{cmd_lambda_sweep, ExperimentConfig, RunOptions};

fn main() -> gradalign::Result<()> {
    let cfg = ExperimentConfig {
        experiment: "lambda_sweep_example".into(),
        shots: vec![1],
        seeds: (1..=6).collect(),
        lambdas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        epochs: Some(50),
        lr0: 0.1,
        ..Default::default()
    };
    let out = std::env::temp_dir().join("gradalign-lambda-sweep");
    let report = cmd_lambda_sweep(&cfg, &RunOptions { out_dir: out, threads: 4, plot: false })?;
    for a in &report.aggregates {
        println!("{:<8} λ={:.2}  new {:.3}  HM {:.3}", a.rule, a.lambda, a.acc_new_mean, a.harmonic_mean_mean);
    }
    if !report.success() {
        println!("failures: {:?}", report.failures);
    }
    Ok(())
}
