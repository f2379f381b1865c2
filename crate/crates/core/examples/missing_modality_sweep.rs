//! Trains briefly, then evaluates every non-empty modality subset on the
//! test split and writes CSV, Markdown, JSON and PNG reports.
//!
//! cargo run --release --example missing_modality_sweep -- [report_dir]

use std::path::PathBuf;

use magms::data::{default_modality_names, generate_phantom, PhantomSpec, Split};
use magms::evaluation::{render_markdown, sweep_state, write_report, ReportFormat};
use magms::training::{train, Arm, TrainState};
use magms::types::ExperimentConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dataset = generate_phantom(&PhantomSpec::standard(3, 3, 16, 3), 12)?;
    let mut config = ExperimentConfig::default();
    config.modalities = default_modality_names(3);
    config.num_classes = 3;
    let mut state = TrainState::new(Arm::Magms, &config)?;
    train(
        &mut state,
        &dataset.split_owned(Split::Train),
        150,
        &mut |_, _| Ok(()),
    )?;

    let identity = format!("in-memory@{}", state.iteration);
    let report = sweep_state(&state, &identity, &dataset, 4)?;
    print!("{}", render_markdown(&report));

    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("magms-sweep"));
    let formats = [ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Png];
    for path in write_report(&report, &formats, &dir)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
