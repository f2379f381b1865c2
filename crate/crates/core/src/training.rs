//! The training loop for every arm, seeded batch scheduling and flip
//! augmentation, checkpoint conversion and the on-disk run directory.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info};
use ndarray::{Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    compute_mean_volumes, dropout_fusion_gradients, fill_forward, FillModel, FillStrategy,
};
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, MultiModalSample, Split};
use crate::error::{MagError, Result};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::model::{param_digest, MagModel};
use crate::nn::{Param, Parameterized, Real};
use crate::optim::Adam;
use crate::rng::stream;
use crate::types::{ExperimentConfig, ModalitySet, ModalitySubset};

/// Default modality dropout probability of the dropout-mean arm.
pub const DEFAULT_DROPOUT: f64 = 0.5;

/// Which model is trained and how.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arm {
    /// Per-modality encoders, shared decoder, self-distillation.
    Magms,
    /// As `Magms` with both distillation weights forced to zero.
    Mag,
    /// Single multichannel encoder, missing channels zero-filled at test time.
    ZeroFill,
    /// Single multichannel encoder, missing channels replaced by the
    /// training-split mean volume at test time.
    MeanFill,
    /// Mean fusion trained on randomly thinned modality subsets.
    DropoutMean { dropout: f64 },
}

impl Arm {
    pub const NAMES: [&'static str; 5] = ["magms", "mag", "zero_fill", "mean_fill", "dropout_mean"];

    pub fn parse(name: &str, dropout: f64) -> Result<Self> {
        let arm = match name.replace('-', "_").as_str() {
            "magms" => Arm::Magms,
            "mag" => Arm::Mag,
            "zero_fill" => Arm::ZeroFill,
            "mean_fill" => Arm::MeanFill,
            "dropout_mean" => Arm::DropoutMean { dropout },
            _ => {
                return Err(MagError::Usage(format!(
                    "unknown arm {name:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        };
        arm.validate()?;
        Ok(arm)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arm::Magms => "magms",
            Arm::Mag => "mag",
            Arm::ZeroFill => "zero_fill",
            Arm::MeanFill => "mean_fill",
            Arm::DropoutMean { .. } => "dropout_mean",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Arm::DropoutMean { dropout } => crate::baselines::check_dropout(*dropout),
            _ => Ok(()),
        }
    }

    /// Every arm except `Magms` trains without distillation terms.
    pub fn distills(&self) -> bool {
        matches!(self, Arm::Magms)
    }

    /// The configuration the arm actually trains with.
    pub fn adapt_config(&self, config: &ExperimentConfig) -> ExperimentConfig {
        let mut c = config.clone();
        if !self.distills() {
            c.lambda_kl = 0.0;
            c.gamma_l2 = 0.0;
        }
        c
    }

    fn fill_strategy(&self) -> Option<FillStrategy> {
        match self {
            Arm::ZeroFill => Some(FillStrategy::Zeros),
            Arm::MeanFill => Some(FillStrategy::DatasetMean),
            _ => None,
        }
    }
}

impl FromStr for Arm {
    type Err = MagError;
    fn from_str(s: &str) -> Result<Self> {
        Arm::parse(s, DEFAULT_DROPOUT)
    }
}

/// The network behind an arm.
#[derive(Debug, Clone, PartialEq)]
pub enum ArmModel {
    Fused(MagModel<f32>),
    Fill(FillModel<f32>),
}

impl Parameterized<f32> for ArmModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<f32>)) {
        match self {
            ArmModel::Fused(m) => m.visit_params(prefix, f),
            ArmModel::Fill(m) => m.visit_params(prefix, f),
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<f32>)) {
        match self {
            ArmModel::Fused(m) => m.visit_params_mut(prefix, f),
            ArmModel::Fill(m) => m.visit_params_mut(prefix, f),
        }
    }
}

/// Anything that maps a sample and an available-modality subset to logits.
pub trait SubsetPredictor {
    fn modalities(&self) -> &ModalitySet;
    fn num_classes(&self) -> usize;
    /// Class logits `[C, D, H, W]` using only the modalities in `subset`.
    fn predict(
        &self,
        sample: &MultiModalSample,
        subset: &ModalitySubset,
    ) -> Result<ndarray::Array4<f32>>;
    /// Digest of every parameter, used to audit that evaluation is read-only.
    fn parameter_digest(&self) -> u64;
}

/// Model, optimizer and bookkeeping of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub arm: Arm,
    pub config: ExperimentConfig,
    pub model: ArmModel,
    pub optimizer: Adam<f32>,
    pub iteration: u64,
    /// Training-split mean volumes, present for the mean-fill arm.
    pub fill_means: Option<Vec<Array3<f32>>>,
}

impl TrainState {
    /// Fresh state; the seed is `config.optimizer.seed`.
    pub fn new(arm: Arm, config: &ExperimentConfig) -> Result<Self> {
        arm.validate()?;
        let config = arm.adapt_config(config);
        config.validate()?;
        let seed = config.optimizer.seed;
        let model = match arm {
            Arm::ZeroFill | Arm::MeanFill => ArmModel::Fill(FillModel::new(&config, seed)?),
            _ => ArmModel::Fused(MagModel::new(&config, seed)?),
        };
        Ok(Self {
            arm,
            optimizer: Adam::new(config.optimizer.learning_rate),
            config,
            model,
            iteration: 0,
            fill_means: None,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.optimizer.seed
    }

    /// Computes whatever the arm needs from the training split before the
    /// first step (the mean volumes of the mean-fill arm).
    pub fn prepare(&mut self, train: &[MultiModalSample]) -> Result<()> {
        if self.arm == Arm::MeanFill && self.fill_means.is_none() {
            let refs: Vec<_> = train.iter().collect();
            self.fill_means = Some(compute_mean_volumes(&refs)?);
        }
        Ok(())
    }

    /// One optimizer update on the batch mean of the arm's loss.
    pub fn train_step(&mut self, batch: &[MultiModalSample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(MagError::Precondition("batch must be non-empty".into()));
        }
        let weights = LossWeights::from_config(&self.config);
        let scale = 1.0 / batch.len() as f32;
        let iteration = self.iteration;
        self.model.zero_grad();
        let breakdown = match (&self.arm, &mut self.model) {
            (Arm::Magms | Arm::Mag, ArmModel::Fused(model)) => {
                let mut seen = Vec::with_capacity(batch.len());
                for sample in batch {
                    let (out, trace) = model.forward_all_traced(sample)?;
                    let (b, grads) = losses::mag_loss_with_grad(sample.labels(), &out, &weights)?;
                    model.backward_all(&trace, &grads);
                    seen.push(b);
                }
                scale_grads(model, scale);
                LossBreakdown::mean(&seen)
            }
            (Arm::DropoutMean { dropout }, ArmModel::Fused(model)) => {
                let mut rng = stream(self.config.optimizer.seed, "dropout", iteration);
                let (b, subsets) = dropout_fusion_gradients(
                    model,
                    batch,
                    *dropout,
                    weights.dice_epsilon,
                    &mut rng,
                )?;
                debug!("iteration {iteration}: dropout subsets {subsets:?}");
                b
            }
            (Arm::ZeroFill | Arm::MeanFill, ArmModel::Fill(model)) => {
                let mut seen = Vec::with_capacity(batch.len());
                for sample in batch {
                    let input = model.full_input(sample)?;
                    let (logits, trace) = model.forward_traced(&input)?;
                    let (loss, grad) =
                        losses::dice_ce_with_grad(sample.labels(), &logits, weights.dice_epsilon)?;
                    model.backward(&trace, &grad);
                    seen.push(LossBreakdown::supervised_only(loss));
                }
                scale_grads(model, scale);
                LossBreakdown::mean(&seen)
            }
            (arm, _) => {
                return Err(MagError::Precondition(format!(
                    "arm {} does not match its model",
                    arm.name()
                )));
            }
        };
        if !breakdown.is_finite() {
            self.model.zero_grad();
            return Err(MagError::NonFiniteLoss {
                iteration,
                breakdown: serde_json::to_string(&breakdown)
                    .unwrap_or_else(|_| format!("{breakdown:?}")),
            });
        }
        self.optimizer.step(&mut self.model);
        self.model.zero_grad();
        self.iteration += 1;
        Ok(breakdown)
    }

    /// Loss of the arm's objective on `batch` without touching any state.
    pub fn evaluate_loss(&self, batch: &[MultiModalSample]) -> Result<LossBreakdown> {
        let weights = LossWeights::from_config(&self.config);
        let mut seen = Vec::with_capacity(batch.len());
        for sample in batch {
            let b = match &self.model {
                ArmModel::Fused(model) => match self.arm {
                    Arm::DropoutMean { .. } => {
                        let logits = model.forward_subset(sample, &model.modalities().full()?)?;
                        LossBreakdown::supervised_only(losses::dice_ce(
                            sample.labels(),
                            &logits,
                            weights.dice_epsilon,
                        )?)
                    }
                    _ => losses::mag_loss(sample.labels(), &model.forward_all(sample)?, &weights)?,
                },
                ArmModel::Fill(model) => {
                    let logits = model.forward(&model.full_input(sample)?)?;
                    LossBreakdown::supervised_only(losses::dice_ce(
                        sample.labels(),
                        &logits,
                        weights.dice_epsilon,
                    )?)
                }
            };
            seen.push(b);
        }
        Ok(LossBreakdown::mean(&seen))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = std::collections::BTreeMap::new();
        self.model.visit_params("", &mut |name, p| {
            tensors.insert(format!("param.{name}"), p.value.clone());
        });
        let (first, second) = self.optimizer.moments();
        for (name, m) in first {
            tensors.insert(format!("adam.m.{name}"), m.clone());
        }
        for (name, v) in second {
            tensors.insert(format!("adam.v.{name}"), v.clone());
        }
        if let Some(means) = &self.fill_means {
            for (id, mean) in self.model_modalities().ids().iter().zip(means) {
                tensors.insert(format!("fill_mean.{}", id.name), mean.clone().into_dyn());
            }
        }
        Checkpoint {
            arm: serde_json::to_value(self.arm).expect("arm serialises"),
            config: self.config.clone(),
            iteration: self.iteration,
            seed: self.seed(),
            optimizer_step: self.optimizer.step_count(),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        let fail = |reason: String| MagError::load(origin, reason);
        let arm: Arm =
            serde_json::from_value(ck.arm.clone()).map_err(|e| fail(format!("bad arm: {e}")))?;
        let mut state = TrainState::new(arm, &ck.config)?;
        if state.config != ck.config {
            return Err(fail(format!("config does not fit arm {}", arm.name())));
        }
        let mut missing = None;
        let mut expected = 0;
        state.model.visit_params_mut("", &mut |name, p| {
            expected += 1;
            match ck.tensors.get(&format!("param.{name}")) {
                Some(t) if t.shape() == p.value.shape() => p.value.assign(t),
                _ => missing = missing.take().or(Some(name)),
            }
        });
        if let Some(name) = missing {
            return Err(fail(format!("parameter {name} missing or misshapen")));
        }
        let mut first = std::collections::BTreeMap::new();
        let mut second = std::collections::BTreeMap::new();
        let mut fill = Vec::new();
        let mut params = 0;
        for (name, t) in &ck.tensors {
            if let Some(n) = name.strip_prefix("adam.m.") {
                first.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                second.insert(n.to_string(), t.clone());
            } else if name.starts_with("fill_mean.") {
                fill.push(name.clone());
            } else if name.starts_with("param.") {
                params += 1;
            } else {
                return Err(fail(format!("unexpected tensor {name}")));
            }
        }
        if params != expected {
            return Err(fail(format!(
                "archive holds {params} parameters, model has {expected}"
            )));
        }
        state.optimizer = Adam::restore(
            ck.config.optimizer.learning_rate,
            ck.optimizer_step,
            first,
            second,
        )
        .map_err(|e| fail(e.to_string()))?;
        if !fill.is_empty() {
            let means = state
                .model_modalities()
                .ids()
                .iter()
                .map(|id| {
                    let t = ck.tensor(&format!("fill_mean.{}", id.name))?;
                    t.clone()
                        .into_dimensionality::<ndarray::Ix3>()
                        .map_err(|_| fail(format!("fill mean for {} is not 3-d", id.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            state.fill_means = Some(means);
        }
        state.iteration = ck.iteration;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }

    fn model_modalities(&self) -> &ModalitySet {
        match &self.model {
            ArmModel::Fused(m) => m.modalities(),
            ArmModel::Fill(m) => m.modalities(),
        }
    }
}

impl SubsetPredictor for TrainState {
    fn modalities(&self) -> &ModalitySet {
        self.model_modalities()
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict(
        &self,
        sample: &MultiModalSample,
        subset: &ModalitySubset,
    ) -> Result<ndarray::Array4<f32>> {
        match (&self.model, self.arm.fill_strategy()) {
            (ArmModel::Fused(m), _) => m.forward_subset(sample, subset),
            (ArmModel::Fill(m), Some(strategy)) => {
                fill_forward(m, sample, subset, strategy, self.fill_means.as_deref())
            }
            (ArmModel::Fill(_), None) => Err(MagError::Precondition(
                "fill model without a fill strategy".into(),
            )),
        }
    }

    fn parameter_digest(&self) -> u64 {
        param_digest(&self.model)
    }
}

fn scale_grads<F: Real, P: Parameterized<F> + ?Sized>(model: &mut P, factor: F) {
    model.visit_params_mut("", &mut |_, p| p.grad.mapv_inplace(|g| g * factor));
}

/// Indices of the training samples in the batch at `iteration`. Every epoch
/// is an independently seeded permutation, so the schedule at any iteration
/// is a pure function of `(seed, n, batch_size, iteration)`.
pub fn batch_indices(seed: u64, n: usize, batch_size: usize, iteration: u64) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|k| {
            let pos = iteration * batch_size as u64 + k;
            let epoch = pos / n as u64;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut stream(seed, "shuffle", epoch));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("filled").1[(pos % n as u64) as usize]
        })
        .collect()
}

/// Random axis flips for batch slot `slot` at `iteration`.
pub fn flip_axes(seed: u64, iteration: u64, slot: usize) -> [bool; 3] {
    let mut rng = stream(seed, &format!("flip-{slot}"), iteration);
    [rng.random(), rng.random(), rng.random()]
}

/// The augmented batch fed to [`TrainState::train_step`] at `iteration`.
pub fn scheduled_batch(
    state: &TrainState,
    train: &[MultiModalSample],
    iteration: u64,
) -> Vec<MultiModalSample> {
    let seed = state.seed();
    batch_indices(
        seed,
        train.len(),
        state.config.optimizer.batch_size,
        iteration,
    )
    .into_iter()
    .enumerate()
    .map(|(slot, i)| train[i].flipped(flip_axes(seed, iteration, slot)))
    .collect()
}

/// Runs `iterations` further steps over the seeded schedule, calling
/// `observer` after each one.
pub fn train(
    state: &mut TrainState,
    train_samples: &[MultiModalSample],
    iterations: u64,
    observer: &mut dyn FnMut(&TrainState, &LossBreakdown) -> Result<()>,
) -> Result<()> {
    if iterations == 0 {
        return Err(MagError::Config("iterations must be >= 1".into()));
    }
    if train_samples.is_empty() {
        return Err(MagError::Config("training split is empty".into()));
    }
    state.prepare(train_samples)?;
    for _ in 0..iterations {
        let batch = scheduled_batch(state, train_samples, state.iteration);
        let breakdown = state.train_step(&batch)?;
        observer(state, &breakdown)?;
    }
    Ok(())
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    /// Completed optimizer steps.
    pub iteration: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Total number of completed steps to reach.
    pub iterations: u64,
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub last: Option<LossBreakdown>,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt-{iteration}.bin")
}

/// Trains on the dataset's training split inside a run directory holding
/// `config.json`, `log.jsonl` and `ckpt-{iter}.bin` files. A state loaded
/// from a checkpoint continues its schedule and appends to the log.
pub fn run_training(
    state: &mut TrainState,
    dataset: &Dataset,
    options: &RunOptions,
) -> Result<RunSummary> {
    if options.iterations <= state.iteration {
        return Err(MagError::Config(format!(
            "target iteration {} not beyond current iteration {}",
            options.iterations, state.iteration
        )));
    }
    if dataset.modalities.names() != state.config.modalities {
        return Err(MagError::Config(format!(
            "dataset modalities {:?} differ from config {:?}",
            dataset.modalities.names(),
            state.config.modalities
        )));
    }
    let dir = &options.out_dir;
    fs::create_dir_all(dir).map_err(|e| MagError::io(dir, e))?;
    state.config.save(&dir.join("config.json"))?;
    let log_path = dir.join("log.jsonl");
    let file = if state.iteration == 0 {
        File::create(&log_path)
    } else {
        OpenOptions::new().create(true).append(true).open(&log_path)
    }
    .map_err(|e| MagError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let train_samples = dataset.split_owned(Split::Train);
    let mut last = None;
    let mut observer = |s: &TrainState, b: &LossBreakdown| -> Result<()> {
        let line = serde_json::to_string(&LogLine {
            iteration: s.iteration,
            loss: b.clone(),
        })?;
        writeln!(log, "{line}").map_err(|e| MagError::io(&log_path, e))?;
        if s.iteration.is_multiple_of(10) {
            info!("iteration {} loss {:.5}", s.iteration, b.total);
        }
        if let Some(every) = options.checkpoint_every {
            if every > 0 && s.iteration.is_multiple_of(every) && s.iteration != options.iterations {
                s.save(&dir.join(checkpoint_name(s.iteration)))?;
            }
        }
        last = Some(b.clone());
        Ok(())
    };
    let result = train(
        state,
        &train_samples,
        options.iterations - state.iteration,
        &mut observer,
    );
    log.flush().map_err(|e| MagError::io(&log_path, e))?;
    result?;
    let final_checkpoint = dir.join(checkpoint_name(state.iteration));
    state.save(&final_checkpoint)?;
    Ok(RunSummary {
        final_checkpoint,
        log: log_path,
        last,
    })
}

/// Parses a `log.jsonl` file.
pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = fs::read_to_string(path).map_err(|e| MagError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(MagError::from))
        .collect()
}

/// Parameter tensors of a state as plain arrays, keyed by name.
pub fn parameter_snapshot(state: &TrainState) -> Vec<(String, ArrayD<f32>)> {
    let mut out = Vec::new();
    state
        .model
        .visit_params("", &mut |n, p| out.push((n, p.value.clone())));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};

    fn small(arm: Arm) -> (TrainState, Dataset) {
        let spec = PhantomSpec::standard(2, 3, 16, 9);
        let ds = generate_phantom(&spec, 4).unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.modalities = spec.modalities.clone();
        cfg.num_classes = 3;
        cfg.backbone.widths = vec![4, 4, 8];
        cfg.optimizer.seed = 5;
        (TrainState::new(arm, &cfg).unwrap(), ds)
    }

    #[test]
    fn arm_names_round_trip() {
        for name in Arm::NAMES {
            assert_eq!(Arm::parse(name, 0.5).unwrap().name(), name);
        }
        assert!(matches!(Arm::parse("hemis", 0.5), Err(MagError::Usage(_))));
        assert!(Arm::parse("dropout_mean", 1.0).is_err());
        let json = serde_json::to_string(&Arm::DropoutMean { dropout: 0.25 }).unwrap();
        assert_eq!(
            serde_json::from_str::<Arm>(&json).unwrap(),
            Arm::DropoutMean { dropout: 0.25 }
        );
    }

    #[test]
    fn mag_arm_zeroes_distillation_weights() {
        let (state, _) = small(Arm::Mag);
        assert_eq!((state.config.lambda_kl, state.config.gamma_l2), (0.0, 0.0));
        let (state, _) = small(Arm::Magms);
        assert_eq!((state.config.lambda_kl, state.config.gamma_l2), (1.0, 1.0));
    }

    #[test]
    fn schedule_is_a_pure_function_covering_each_epoch() {
        let n = 5;
        let mut seen = Vec::new();
        for it in 0..5 {
            let b = batch_indices(3, n, 2, it);
            assert_eq!(b, batch_indices(3, n, 2, it));
            seen.extend(b);
        }
        let mut first_epoch = seen[..5].to_vec();
        first_epoch.sort();
        assert_eq!(first_epoch, vec![0, 1, 2, 3, 4]);
        assert_ne!(batch_indices(3, n, 2, 0), batch_indices(4, n, 2, 0));
    }

    #[test]
    fn identical_states_give_identical_steps() {
        for arm in [Arm::Magms, Arm::DropoutMean { dropout: 0.5 }, Arm::ZeroFill] {
            let (mut a, ds) = small(arm);
            let mut b = a.clone();
            let batch = ds.split_owned(Split::Train)[..2].to_vec();
            assert_eq!(a.train_step(&batch).unwrap(), b.train_step(&batch).unwrap());
            assert_eq!(a, b);
            assert_eq!(a.iteration, 1);
        }
    }

    #[test]
    fn empty_batch_and_zero_iterations_rejected() {
        let (mut s, ds) = small(Arm::Mag);
        assert!(matches!(s.train_step(&[]), Err(MagError::Precondition(_))));
        let train_samples = ds.split_owned(Split::Train);
        assert!(matches!(
            train(&mut s, &train_samples, 0, &mut |_, _| Ok(())),
            Err(MagError::Config(_))
        ));
        assert!(matches!(
            train(&mut s, &[], 3, &mut |_, _| Ok(())),
            Err(MagError::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_state_and_loss() {
        for arm in [Arm::Magms, Arm::MeanFill] {
            let (mut s, ds) = small(arm);
            let train_samples = ds.split_owned(Split::Train);
            train(&mut s, &train_samples, 2, &mut |_, _| Ok(())).unwrap();
            let ck = s.to_checkpoint();
            let bytes = ck.to_bytes();
            let back = TrainState::from_checkpoint(
                &Checkpoint::from_bytes(&bytes, Path::new("m")).unwrap(),
                Path::new("m"),
            )
            .unwrap();
            assert_eq!(back, s);
            assert_eq!(back.to_checkpoint().to_bytes(), bytes);
            let batch = &train_samples[..1];
            assert_eq!(
                back.evaluate_loss(batch).unwrap(),
                s.evaluate_loss(batch).unwrap()
            );
        }
    }

    #[test]
    fn non_finite_loss_aborts_without_update() {
        let (mut s, ds) = small(Arm::Magms);
        s.model.visit_params_mut("", &mut |name, p| {
            if name == "decoder.head.bias" {
                p.value.fill(f32::NAN);
            }
        });
        let before = s.clone();
        let batch = ds.split_owned(Split::Train)[..1].to_vec();
        let err = s.train_step(&batch).unwrap_err();
        assert!(
            matches!(err, MagError::Numeric(_) | MagError::NonFiniteLoss { .. }),
            "{err}"
        );
        assert_eq!(s.iteration, before.iteration);
    }
}
