//! Steps two training sessions by hand and prints how the angle between
//! the task and teacher gradients evolves.

use gradalign::datagen::{build_domains, sample_episode, DomainSpec};
use gradalign::surgery::UpdateRule;
use gradalign::trainer::{TrainConfig, TrainSession};
use gradalign::vlm::{FrozenVlm, VlmSpec};

fn main() -> gradalign::Result<()> {
    let vlm = FrozenVlm::random(VlmSpec::default())?;
    let spec = DomainSpec::default();
    let (_, downstream) = build_domains(&vlm, &spec)?;
    let episode = sample_episode(&downstream, &spec, 4, 1)?;

    for rule in [UpdateRule::Ce, UpdateRule::Prograd { lambda: 1.0 }] {
        let cfg = TrainConfig { rule, lr0: 2.0, epochs: 600, seed: 1, ..Default::default() };
        let mut session = TrainSession::new(&vlm, &episode.train, cfg)?;
        let mut window = Vec::new();
        println!("{}", rule.tag());
        while !session.is_done() {
            let rec = session.step()?;
            window.push(rec.angle_deg);
            if window.len() == 100 {
                let mean = window.iter().sum::<f64>() / 100.0;
                println!("  steps {:>3}-{:>3}: mean angle {mean:6.1}°  loss_ce {:.4}", rec.step - 99, rec.step, rec.loss_ce);
                window.clear();
            }
        }
    }
    Ok(())
}
