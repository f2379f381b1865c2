//! Trains a small modality-agnostic model with self-distillation and prints
//! the loss breakdown as training proceeds.
//!
//! cargo run --release --example train_magms -- [iterations]

use magms::data::{default_modality_names, generate_phantom, PhantomSpec, Split};
use magms::training::{train, Arm, TrainState};
use magms::types::ExperimentConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(60);
    let dataset = generate_phantom(&PhantomSpec::standard(3, 3, 16, 1), 12)?;

    let mut config = ExperimentConfig::default();
    config.modalities = default_modality_names(3);
    config.num_classes = 3;
    let mut state = TrainState::new(Arm::Magms, &config)?;

    let samples = dataset.split_owned(Split::Train);
    train(&mut state, &samples, iterations, &mut |s, loss| {
        if s.iteration % 10 == 0 {
            let per_modality: Vec<String> = loss
                .per_modality
                .iter()
                .map(|t| format!("dc {:.3} kl {:.4} l2 {:.4}", t.dice_ce, t.kl, t.feature_l2))
                .collect();
            println!(
                "{:>4} total {:.4} fused {:.4} | {}",
                s.iteration,
                loss.total,
                loss.fused_dice_ce,
                per_modality.join(" | ")
            );
        }
        Ok(())
    })?;

    let val = dataset.split_owned(Split::Val);
    let loss = state.evaluate_loss(&val)?;
    println!(
        "validation loss {:.4} (fused term {:.4})",
        loss.total, loss.fused_dice_ce
    );
    Ok(())
}
