//! Trains every arm on the same complementary phantom and compares Dice with
//! all modalities against Dice with a single modality, plus the distillation
//! effect on KL(fused || single modality).
//!
//! cargo run --release --example compare_arms -- [iterations]

use magms::data::{generate_phantom, PhantomSpec, Split};
use magms::evaluation::sweep_state;
use magms::theory::distillation_tightens_bound;
use magms::training::{train, Arm, TrainState, DEFAULT_DROPOUT};
use magms::types::{ExperimentConfig, ModalitySubset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(200);
    let spec = PhantomSpec::complementary(3, 16, 5);
    let dataset = generate_phantom(&spec, 12)?;
    let mut config = ExperimentConfig::default();
    config.modalities = dataset.modalities.names();
    config.num_classes = spec.num_classes;
    let samples = dataset.split_owned(Split::Train);

    let arms = [
        Arm::Magms,
        Arm::Mag,
        Arm::ZeroFill,
        Arm::MeanFill,
        Arm::DropoutMean {
            dropout: DEFAULT_DROPOUT,
        },
    ];
    let mut states = Vec::new();
    println!("{:<13} {:>10} {:>12}", "arm", "all Dice", "single Dice");
    for arm in arms {
        let mut state = TrainState::new(arm, &config)?;
        train(&mut state, &samples, iterations, &mut |_, _| Ok(()))?;
        let report = sweep_state(&state, arm.name(), &dataset, 4)?;
        let full = report.full_row().map(|r| r.dice.mean).unwrap_or(f64::NAN);
        let singles: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.subset.len() == 1)
            .map(|r| r.dice.mean)
            .collect();
        let single = singles.iter().sum::<f64>() / singles.len() as f64;
        println!("{:<13} {full:>10.4} {single:>12.4}", arm.name());
        states.push(state);
    }

    for m in 0..dataset.modalities.len() {
        let subset = ModalitySubset::new(&dataset.modalities, [m])?;
        let cmp = distillation_tightens_bound(&states[0], &states[1], &dataset, &subset)?;
        println!(
            "{}: KL with {:.4} without {:.4}, entropy with {:.4} without {:.4}",
            cmp.subset,
            cmp.with_distillation.mean_kl,
            cmp.without_distillation.mean_kl,
            cmp.with_distillation.mean_entropy,
            cmp.without_distillation.mean_entropy
        );
    }
    Ok(())
}
