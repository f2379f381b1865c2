//! Metrics, the all-subsets sweep of one trained model and report rendering.

pub mod metrics;
pub mod report;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, MultiModalSample, Split};
use crate::error::{MagError, Result};
use crate::training::{SubsetPredictor, TrainState};
use crate::types::{enumerate_subsets, ModalitySubset};

pub use metrics::{argmax_labels, dice_score, evaluate_prediction, hd95, MetricResult};
pub use report::{render_csv, render_markdown, render_report, write_report, ReportFormat};

/// Mean and sample standard deviation (`n - 1` denominator, 0 for a single
/// value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

/// Metrics of one modality subset aggregated over the test subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub subset: Vec<usize>,
    pub label: String,
    pub available: Vec<bool>,
    /// Mean foreground Dice per subject, aggregated.
    pub dice: Aggregate,
    /// Mean foreground HD95 per subject where defined, aggregated.
    pub hd95: Option<Aggregate>,
    pub per_class_dice: Vec<Aggregate>,
    pub per_class_hd95: Vec<Option<Aggregate>>,
}

/// One row per non-empty subset, in enumeration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub modalities: Vec<String>,
    pub arm: String,
    pub rows: Vec<SweepRow>,
    /// SHA-256 of the evaluated checkpoint archive.
    pub checkpoint: String,
    pub config_hash: String,
    pub test_subjects: Vec<String>,
    /// Parameter updates performed while sweeping; always 0.
    pub parameter_updates: u64,
}

impl SweepReport {
    pub fn row(&self, subset: &ModalitySubset) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.subset == subset.members())
    }

    /// The row using every modality.
    pub fn full_row(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.available.iter().all(|&a| a))
    }
}

/// Per-subject metrics of one subset.
pub fn evaluate_subset(
    predictor: &dyn SubsetPredictor,
    samples: &[&MultiModalSample],
    subset: &ModalitySubset,
) -> Result<Vec<MetricResult>> {
    samples
        .iter()
        .map(|s| {
            let logits = predictor.predict(s, subset)?;
            let pred = argmax_labels(&logits)?;
            evaluate_prediction(&pred, s.labels(), s.spacing())
        })
        .collect()
}

fn aggregate_row(
    predictor: &dyn SubsetPredictor,
    subset: &ModalitySubset,
    results: &[MetricResult],
) -> Result<SweepRow> {
    let dice: Vec<f64> = results.iter().map(|r| r.mean_dice).collect();
    let hd: Vec<f64> = results.iter().filter_map(|r| r.mean_hd95).collect();
    let classes = predictor.num_classes().saturating_sub(1);
    let per_class_dice = (0..classes)
        .map(|k| {
            let v: Vec<f64> = results.iter().map(|r| r.per_class_dice[k]).collect();
            Aggregate::of(&v).ok_or_else(|| MagError::Precondition("no test subjects".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_class_hd95 = (0..classes)
        .map(|k| {
            Aggregate::of(
                &results
                    .iter()
                    .filter_map(|r| r.per_class_hd95[k])
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    Ok(SweepRow {
        subset: subset.members().to_vec(),
        label: subset.label(predictor.modalities()),
        available: subset.availability(),
        dice: Aggregate::of(&dice)
            .ok_or_else(|| MagError::Precondition("no test subjects".into()))?,
        hd95: Aggregate::of(&hd),
        per_class_dice,
        per_class_hd95,
    })
}

/// Evaluates every non-empty subset of the predictor's modalities on
/// `samples`, in enumeration order. Subjects are processed on up to `jobs`
/// threads; results do not depend on `jobs`.
pub fn sweep_subsets(
    predictor: &(dyn SubsetPredictor + Sync),
    samples: &[&MultiModalSample],
    checkpoint: &str,
    config_hash: &str,
    arm: &str,
    jobs: usize,
) -> Result<SweepReport> {
    if samples.is_empty() {
        return Err(MagError::Config(
            "sweep needs at least one test subject".into(),
        ));
    }
    let digest_before = predictor.parameter_digest();
    let subsets = enumerate_subsets(predictor.modalities())?;
    let jobs = jobs.max(1).min(samples.len());
    let mut rows = Vec::with_capacity(subsets.len());
    for subset in &subsets {
        let results = if jobs == 1 {
            evaluate_subset(predictor, samples, subset)?
        } else {
            let chunk = samples.len().div_ceil(jobs);
            std::thread::scope(|scope| {
                let handles: Vec<_> = samples
                    .chunks(chunk)
                    .map(|part| scope.spawn(move || evaluate_subset(predictor, part, subset)))
                    .collect();
                let mut all = Vec::with_capacity(samples.len());
                for h in handles {
                    all.extend(h.join().expect("evaluation thread panicked")?);
                }
                Ok::<_, MagError>(all)
            })?
        };
        rows.push(aggregate_row(predictor, subset, &results)?);
    }
    if predictor.parameter_digest() != digest_before {
        return Err(MagError::Precondition(
            "parameters changed during the sweep".into(),
        ));
    }
    Ok(SweepReport {
        modalities: predictor.modalities().names(),
        arm: arm.to_string(),
        rows,
        checkpoint: checkpoint.to_string(),
        config_hash: config_hash.to_string(),
        test_subjects: samples.iter().map(|s| s.subject_id.clone()).collect(),
        parameter_updates: 0,
    })
}

/// Loads one checkpoint and sweeps the test split of `dataset`, which must
/// contain every modality the checkpoint was trained on.
pub fn sweep_checkpoint(path: &Path, dataset: &Dataset, jobs: usize) -> Result<SweepReport> {
    let ck = Checkpoint::load(path)?;
    let state = TrainState::from_checkpoint(&ck, path)?;
    sweep_state(&state, &ck.identity(), dataset, jobs)
}

pub fn sweep_state(
    state: &TrainState,
    identity: &str,
    dataset: &Dataset,
    jobs: usize,
) -> Result<SweepReport> {
    let wanted = state.modalities();
    let data = if dataset.modalities.names() == wanted.names() {
        None
    } else {
        Some(
            dataset
                .restricted_to(wanted)
                .map_err(|e| MagError::Config(e.to_string()))?,
        )
    };
    let data = data.as_ref().unwrap_or(dataset);
    let test = data.split(Split::Test);
    sweep_subsets(
        state,
        &test,
        identity,
        &state.config.hash(),
        state.arm.name(),
        jobs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_conventions() {
        assert_eq!(Aggregate::of(&[]), None);
        let one = Aggregate::of(&[0.7]).unwrap();
        assert_eq!((one.mean, one.std, one.n), (0.7, 0.0, 1));
        let two = Aggregate::of(&[1.0, 3.0]).unwrap();
        assert_eq!(two.mean, 2.0);
        assert!((two.std - 2f64.sqrt()).abs() < 1e-12);
    }
}
