//! Few-shot tuning of a cosine classifier initialised from the teacher's
//! class features, instead of the prompt.

use gradalign::datagen::{build_domains, sample_episode, DomainSpec};
use gradalign::surgery::UpdateRule;
use gradalign::trainer::{train, Target, TrainConfig};
use gradalign::vlm::{FrozenVlm, VlmSpec};

fn main() -> gradalign::Result<()> {
    let vlm = FrozenVlm::random(VlmSpec::default())?;
    let spec = DomainSpec::default();
    let (_, downstream) = build_domains(&vlm, &spec)?;
    let episode = sample_episode(&downstream, &spec, 2, 5)?;

    for rule in [UpdateRule::Ce, UpdateRule::Prograd { lambda: 1.0 }, UpdateRule::L2reg { alpha: 0.01 }] {
        let cfg = TrainConfig {
            rule,
            lr0: 0.05,
            epochs: 100,
            target: Target::CosineClassifier,
            seed: 5,
            ..Default::default()
        };
        let (_, record) = train(&vlm, &episode, &cfg)?;
        let f = record.final_metrics;
        println!(
            "{:<7} base {:.3}  new {:.3}  HM {:.3}  (zero-shot overall {:.3})",
            rule.tag(),
            f.acc_base,
            f.acc_new,
            f.harmonic_mean,
            f.acc_zero_shot
        );
    }
    Ok(())
}
