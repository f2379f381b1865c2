//! Comparison arms: single-encoder models that receive every modality as an
//! input channel and fill missing ones, and mean fusion trained with random
//! modality dropout.

use ndarray::{Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiModalSample;
use crate::error::{MagError, Result};
use crate::losses::{self, LossBreakdown};
use crate::model::{
    volumes_to_input, ConvEncoder, ConvEncoderTrace, Decoder, DecoderTrace, Encoder, FeatureBundle,
    MagModel,
};
use crate::nn::{join, Param, Parameterized, Real};
use crate::rng::stream;
use crate::types::{ExperimentConfig, ModalitySet, ModalitySubset};

/// What a missing modality channel is replaced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillStrategy {
    Zeros,
    DatasetMean,
}

/// One encoder over all modalities stacked as channels, then the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FillModel<F> {
    modalities: ModalitySet,
    depth: usize,
    encoder: ConvEncoder<F>,
    decoder: Decoder<F>,
}

#[derive(Debug)]
pub struct FillTrace<F> {
    encoder: ConvEncoderTrace<F>,
    decoder: DecoderTrace<F>,
}

impl<F: Real> FillModel<F> {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let modalities = config.modality_set()?;
        let mut rng = stream(seed, "init", 0);
        let encoder = ConvEncoder::new(modalities.len(), &config.backbone, &mut rng);
        let decoder = Decoder::new(&config.backbone, config.num_classes, &mut rng);
        Ok(Self {
            modalities,
            depth: config.backbone.depth(),
            encoder,
            decoder,
        })
    }

    pub fn modalities(&self) -> &ModalitySet {
        &self.modalities
    }

    /// Logits for an `[M, D, H, W]` input.
    pub fn forward(&self, input: &Array4<F>) -> Result<Array4<F>> {
        Ok(self.forward_traced(input)?.0)
    }

    pub fn forward_traced(&self, input: &Array4<F>) -> Result<(Array4<F>, FillTrace<F>)> {
        let (levels, encoder) = self.encoder.encode_levels(input)?;
        let (logits, decoder) = self
            .decoder
            .forward_traced(&FeatureBundle::new(levels, None))?;
        Ok((logits, FillTrace { encoder, decoder }))
    }

    pub fn backward(&mut self, trace: &FillTrace<F>, d_logits: &Array4<F>) {
        let d_bundle = self.decoder.backward(&trace.decoder, d_logits);
        self.encoder
            .backward(&trace.encoder, d_bundle.into_levels());
    }

    /// Network input with every modality present.
    pub fn full_input(&self, sample: &MultiModalSample) -> Result<Array4<F>> {
        let volumes = self
            .modalities
            .ids()
            .iter()
            .map(|id| {
                let v = sample.volume(id.index)?;
                if v.modality.name != id.name {
                    return Err(MagError::Data(format!(
                        "subject {} has modality {} where {} was expected",
                        sample.subject_id, v.modality.name, id.name
                    )));
                }
                Ok(&v.voxels)
            })
            .collect::<Result<Vec<_>>>()?;
        volumes_to_input(&volumes, self.depth)
    }
}

impl<F: Real> Parameterized<F> for FillModel<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
    }
}

/// Voxel-wise mean of every modality over the given (training) subjects.
pub fn compute_mean_volumes(samples: &[&MultiModalSample]) -> Result<Vec<Array3<f32>>> {
    let first = samples
        .first()
        .ok_or_else(|| MagError::Config("mean volumes need at least one subject".into()))?;
    let m = first.num_modalities();
    let mut sums: Vec<Array3<f64>> = (0..m).map(|_| Array3::zeros(first.shape())).collect();
    for s in samples {
        if s.num_modalities() != m || s.shape() != first.shape() {
            return Err(MagError::Data(format!(
                "subject {} does not match the shape of subject {}",
                s.subject_id, first.subject_id
            )));
        }
        for (acc, v) in sums.iter_mut().zip(s.volumes()) {
            ndarray::Zip::from(acc)
                .and(&v.voxels)
                .for_each(|a, &x| *a += f64::from(x));
        }
    }
    let n = samples.len() as f64;
    Ok(sums
        .into_iter()
        .map(|a| a.mapv(|v| (v / n) as f32))
        .collect())
}

/// Forward pass of a fill model where channels outside `subset` are replaced
/// according to `strategy`.
pub fn fill_forward<F: Real>(
    model: &FillModel<F>,
    sample: &MultiModalSample,
    subset: &ModalitySubset,
    strategy: FillStrategy,
    means: Option<&[Array3<f32>]>,
) -> Result<Array4<F>> {
    let m = model.modalities.len();
    if subset.is_empty() {
        return Err(MagError::Precondition("subset must be non-empty".into()));
    }
    if let Some(&bad) = subset.members().iter().find(|&&i| i >= m) {
        return Err(MagError::Config(format!(
            "subset member {bad} outside {m} modalities"
        )));
    }
    let means = match strategy {
        FillStrategy::DatasetMean => {
            let means = means.ok_or_else(|| {
                MagError::Config("mean fill needs training-split mean volumes".into())
            })?;
            if means.len() != m || means.iter().any(|v| v.shape() != sample.shape()) {
                return Err(MagError::Config(format!(
                    "expected {m} mean volumes of shape {:?}",
                    sample.shape()
                )));
            }
            Some(means)
        }
        FillStrategy::Zeros => None,
    };
    let zeros = Array3::<f32>::zeros(sample.shape());
    let mut channels = Vec::with_capacity(m);
    for i in 0..m {
        if subset.contains(i) {
            channels.push(&sample.volume(i)?.voxels);
        } else {
            channels.push(means.map_or(&zeros, |mv| &mv[i]));
        }
    }
    let input = volumes_to_input(&channels, model.depth)?;
    model.forward(&input)
}

/// Uniform draw over the `2^M - 1` non-empty subsets.
pub fn draw_uniform_subset<R: Rng + ?Sized>(
    set: &ModalitySet,
    rng: &mut R,
) -> Result<ModalitySubset> {
    let m = set.len();
    if m == 0 || m > 63 {
        return Err(MagError::Config(format!(
            "cannot draw subsets of {m} modalities"
        )));
    }
    let mask = rng.random_range(1..(1u64 << m));
    ModalitySubset::from_mask(set, mask)
}

/// Training-time subset: the full set with probability `1 - dropout_prob`,
/// otherwise a uniform non-empty subset.
pub fn draw_training_subset<R: Rng + ?Sized>(
    set: &ModalitySet,
    dropout_prob: f64,
    rng: &mut R,
) -> Result<ModalitySubset> {
    check_dropout(dropout_prob)?;
    if rng.random::<f64>() < dropout_prob {
        draw_uniform_subset(set, rng)
    } else {
        set.full()
    }
}

pub(crate) fn check_dropout(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(MagError::Config(format!(
            "dropout probability must lie in (0, 1), got {p}"
        )))
    }
}

/// Accumulates gradients of the supervision loss on one randomly thinned
/// subset per sample (the caller applies the optimizer update). Returns the
/// batch-mean loss and the drawn subsets.
pub fn dropout_fusion_gradients<F: Real, R: Rng + ?Sized>(
    model: &mut MagModel<F>,
    batch: &[MultiModalSample],
    dropout_prob: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<(LossBreakdown, Vec<ModalitySubset>)> {
    check_dropout(dropout_prob)?;
    if batch.is_empty() {
        return Err(MagError::Precondition("batch must be non-empty".into()));
    }
    let scale = F::from_f64_lossy(1.0 / batch.len() as f64);
    let mut losses_seen = Vec::with_capacity(batch.len());
    let mut subsets = Vec::with_capacity(batch.len());
    for sample in batch {
        let subset = draw_training_subset(model.modalities(), dropout_prob, rng)?;
        let (logits, trace) = model.forward_subset_traced(sample, &subset)?;
        let (loss, grad) = losses::dice_ce_with_grad(sample.labels(), &logits, epsilon)?;
        model.backward_subset(&trace, &(grad * scale));
        losses_seen.push(LossBreakdown::supervised_only(loss));
        subsets.push(subset);
    }
    Ok((LossBreakdown::mean(&losses_seen), subsets))
}
