//! Trains one prompt per rule on a few-shot episode and reports accuracy.

use gradalign::datagen::{build_domains, sample_episode, DomainSpec};
use gradalign::surgery::UpdateRule;
use gradalign::trainer::{train, TrainConfig};
use gradalign::vlm::{FrozenVlm, VlmSpec};

fn main() -> gradalign::Result<()> {
    let vlm = FrozenVlm::random(VlmSpec::default())?;
    let spec = DomainSpec::default();
    let (_, downstream) = build_domains(&vlm, &spec)?;

    for shots in [1, 4] {
        let episode = sample_episode(&downstream, &spec, shots, 3)?;
        for rule in [UpdateRule::Ce, UpdateRule::Prograd { lambda: 1.0 }, UpdateRule::Kd] {
            let cfg = TrainConfig { rule, lr0: 0.1, epochs: 50, seed: 3, ..Default::default() };
            let (_, record) = train(&vlm, &episode, &cfg)?;
            let f = record.final_metrics;
            println!(
                "{shots}-shot {:<7} overall {:.3}  base {:.3}  new {:.3}  (zero-shot {:.3})",
                rule.tag(),
                f.acc_overall,
                f.acc_base,
                f.acc_new,
                f.acc_zero_shot
            );
        }
    }
    Ok(())
}
