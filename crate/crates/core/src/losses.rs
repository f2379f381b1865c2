//! Dice + cross-entropy supervision, the two self-distillation terms and
//! their combination into the per-modality and whole-model MAG loss.
//!
//! Reductions are carried out in `f64` whatever the network precision; the
//! returned gradients have the network's scalar type. Teacher inputs (fused
//! logits and fused features) are constants for the distillation terms, so
//! only student gradients are produced for them.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{MagError, Result};
use crate::model::{FeatureBundle, ForwardAll, ForwardAllGrads};
use crate::nn::Real;
use crate::types::{ExperimentConfig, LabelMap};

/// Loss weights shared by every per-modality term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub gamma_l2: f64,
    pub temperature: f64,
    pub dice_epsilon: f64,
}

impl LossWeights {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        Self {
            lambda_kl: config.lambda_kl,
            gamma_l2: config.gamma_l2,
            temperature: config.kl_temperature,
            dice_epsilon: config.dice_epsilon,
        }
    }
}

/// Components of one modality's combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityLoss {
    pub dice_ce: f64,
    pub kl: f64,
    pub feature_l2: f64,
    pub combined: f64,
}

/// Every term of the MAG loss for one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fused_dice_ce: f64,
    pub per_modality: Vec<ModalityLoss>,
    pub total: f64,
}

impl LossBreakdown {
    /// Supervision-only breakdown used by arms that train a single output.
    pub fn supervised_only(dice_ce: f64) -> Self {
        Self {
            fused_dice_ce: dice_ce,
            per_modality: Vec::new(),
            total: dice_ce,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.fused_dice_ce.is_finite()
            && self.per_modality.iter().all(|m| {
                m.dice_ce.is_finite()
                    && m.kl.is_finite()
                    && m.feature_l2.is_finite()
                    && m.combined.is_finite()
            })
    }

    /// Field-wise mean over a batch.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let m = items.first().map_or(0, |b| b.per_modality.len());
        let mut out = LossBreakdown {
            fused_dice_ce: 0.0,
            per_modality: vec![
                ModalityLoss {
                    dice_ce: 0.0,
                    kl: 0.0,
                    feature_l2: 0.0,
                    combined: 0.0
                };
                m
            ],
            total: 0.0,
        };
        for b in items {
            out.fused_dice_ce += b.fused_dice_ce / n;
            out.total += b.total / n;
            for (acc, x) in out.per_modality.iter_mut().zip(&b.per_modality) {
                acc.dice_ce += x.dice_ce / n;
                acc.kl += x.kl / n;
                acc.feature_l2 += x.feature_l2 / n;
                acc.combined += x.combined / n;
            }
        }
        out
    }
}

fn check_finite<F: Real>(what: &str, x: &Array4<F>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MagError::Numeric(format!(
            "{what} contain non-finite values"
        )));
    }
    Ok(())
}

fn check_logits<F: Real>(labels: &LabelMap, logits: &Array4<F>) -> Result<()> {
    let c = logits.shape()[0];
    if c != labels.num_classes() {
        return Err(MagError::Dimension(format!(
            "logits have {c} channels for {} classes",
            labels.num_classes()
        )));
    }
    if logits.shape()[1..] != labels.shape() {
        return Err(MagError::Dimension(format!(
            "logits extent {:?} differs from labels {:?}",
            &logits.shape()[1..],
            labels.shape()
        )));
    }
    check_finite("logits", logits)
}

/// Per-voxel softmax over channels of `logits / temperature`, returned as
/// channel-major `f64` probabilities together with their logarithms.
fn softmax_parts<F: Real>(
    logits: &Array4<F>,
    temperature: f64,
) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let c = logits.shape()[0];
    let n = logits.len() / c.max(1);
    let z = logits.as_standard_layout();
    let z = z.as_slice().expect("standard layout");
    let mut prob = vec![0.0; c * n];
    let mut logp = vec![0.0; c * n];
    for v in 0..n {
        let mut max = f64::NEG_INFINITY;
        for k in 0..c {
            max = max.max(z[k * n + v].to_f64().expect("finite") / temperature);
        }
        let mut sum = 0.0;
        for k in 0..c {
            let e = (z[k * n + v].to_f64().expect("finite") / temperature - max).exp();
            prob[k * n + v] = e;
            sum += e;
        }
        let log_sum = sum.ln();
        for k in 0..c {
            let idx = k * n + v;
            logp[idx] = z[idx].to_f64().expect("finite") / temperature - max - log_sum;
            prob[idx] /= sum;
        }
    }
    (prob, logp, c, n)
}

fn to_array<F: Real>(shape: &[usize], data: Vec<f64>) -> Array4<F> {
    let data: Vec<F> = data.into_iter().map(F::from_f64_lossy).collect();
    Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), data).expect("shape matches")
}

/// Separate soft-Dice and cross-entropy parts of [`dice_ce`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceCeParts {
    pub dice: f64,
    pub ce: f64,
}

impl DiceCeParts {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

fn dice_ce_impl<F: Real>(
    labels: &LabelMap,
    logits: &Array4<F>,
    epsilon: f64,
    want_grad: bool,
) -> Result<(DiceCeParts, Option<Array4<F>>)> {
    check_logits(labels, logits)?;
    let (p, logp, c, n) = softmax_parts(logits, 1.0);
    let y = labels.classes().as_standard_layout();
    let y = y.as_slice().expect("standard layout");

    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut gsum = vec![0.0; c];
    let mut ce = 0.0;
    for v in 0..n {
        let t = y[v] as usize;
        for k in 0..c {
            psum[k] += p[k * n + v];
        }
        inter[t] += p[t * n + v];
        gsum[t] += 1.0;
        ce -= logp[t * n + v];
    }
    ce /= n as f64;
    let ratios: Vec<f64> = (0..c)
        .map(|k| (2.0 * inter[k] + epsilon) / (psum[k] + gsum[k] + epsilon))
        .collect();
    let dice = 1.0 - ratios.iter().sum::<f64>() / c as f64;
    let parts = DiceCeParts { dice, ce };
    if !want_grad {
        return Ok((parts, None));
    }

    let mut grad = vec![0.0; c * n];
    let mut a = vec![0.0; c];
    for v in 0..n {
        let t = y[v] as usize;
        let mut dot = 0.0;
        for k in 0..c {
            let den = psum[k] + gsum[k] + epsilon;
            let g = if k == t { 1.0 } else { 0.0 };
            a[k] = -(2.0 * g * den - (2.0 * inter[k] + epsilon)) / (den * den * c as f64);
            dot += p[k * n + v] * a[k];
        }
        for k in 0..c {
            let idx = k * n + v;
            let g = if k == t { 1.0 } else { 0.0 };
            grad[idx] = p[idx] * (a[k] - dot) + (p[idx] - g) / n as f64;
        }
    }
    Ok((parts, Some(to_array(logits.shape(), grad))))
}

/// Soft Dice (per class including background, averaged) plus voxel-mean
/// cross-entropy.
pub fn dice_ce<F: Real>(labels: &LabelMap, logits: &Array4<F>, epsilon: f64) -> Result<f64> {
    Ok(dice_ce_impl(labels, logits, epsilon, false)?.0.total())
}

pub fn dice_ce_parts<F: Real>(
    labels: &LabelMap,
    logits: &Array4<F>,
    epsilon: f64,
) -> Result<DiceCeParts> {
    Ok(dice_ce_impl(labels, logits, epsilon, false)?.0)
}

/// [`dice_ce`] and its gradient with respect to the logits.
pub fn dice_ce_with_grad<F: Real>(
    labels: &LabelMap,
    logits: &Array4<F>,
    epsilon: f64,
) -> Result<(f64, Array4<F>)> {
    let (parts, grad) = dice_ce_impl(labels, logits, epsilon, true)?;
    Ok((parts.total(), grad.expect("gradient requested")))
}

fn kl_impl<F: Real>(
    teacher: &Array4<F>,
    student: &Array4<F>,
    temperature: f64,
    want_grad: bool,
) -> Result<(f64, Option<Array4<F>>)> {
    if teacher.shape() != student.shape() {
        return Err(MagError::Dimension(format!(
            "teacher logits {:?} vs student logits {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(MagError::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    check_finite("teacher logits", teacher)?;
    check_finite("student logits", student)?;
    let (t, log_t, c, n) = softmax_parts(teacher, temperature);
    let (s, log_s, _, _) = softmax_parts(student, temperature);
    let mut total = 0.0;
    for idx in 0..c * n {
        if t[idx] > 0.0 {
            total += t[idx] * (log_t[idx] - log_s[idx]);
        }
    }
    let value = (total / n as f64).max(0.0);
    if !want_grad {
        return Ok((value, None));
    }
    let scale = 1.0 / (temperature * n as f64);
    let grad: Vec<f64> = s.iter().zip(&t).map(|(s, t)| (s - t) * scale).collect();
    Ok((value, Some(to_array(student.shape(), grad))))
}

/// Voxel-mean KL(softmax(teacher/T) || softmax(student/T)) in nats.
pub fn pixel_kl<F: Real>(
    teacher: &Array4<F>,
    student: &Array4<F>,
    temperature: f64,
) -> Result<f64> {
    Ok(kl_impl(teacher, student, temperature, false)?.0)
}

/// Voxel-mean entropy of softmax(logits) in nats.
pub fn mean_entropy<F: Real>(logits: &Array4<F>) -> Result<f64> {
    check_finite("logits", logits)?;
    let (p, log_p, c, n) = softmax_parts(logits, 1.0);
    let total: f64 = (0..c * n)
        .filter(|&i| p[i] > 0.0)
        .map(|i| -p[i] * log_p[i])
        .sum();
    Ok(total / n.max(1) as f64)
}

/// [`pixel_kl`] and its gradient with respect to the student logits only.
pub fn pixel_kl_with_grad<F: Real>(
    teacher: &Array4<F>,
    student: &Array4<F>,
    temperature: f64,
) -> Result<(f64, Array4<F>)> {
    let (v, g) = kl_impl(teacher, student, temperature, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn l2_impl<F: Real>(
    student: &FeatureBundle<F>,
    teacher: &FeatureBundle<F>,
    want_grad: bool,
) -> Result<(f64, Option<FeatureBundle<F>>)> {
    if !student.same_shape(teacher) {
        return Err(MagError::Dimension(format!(
            "student features {:?} vs teacher features {:?}",
            student.shapes(),
            teacher.shapes()
        )));
    }
    let count = student.element_count().max(1) as f64;
    let mut sum = 0.0;
    for (s, t) in student.levels().iter().zip(teacher.levels()) {
        for (a, b) in s.iter().zip(t.iter()) {
            let d = a.to_f64().expect("finite") - b.to_f64().expect("finite");
            sum += d * d;
        }
    }
    let value = sum / count;
    if !value.is_finite() {
        return Err(MagError::Numeric("feature distance is not finite".into()));
    }
    if !want_grad {
        return Ok((value, None));
    }
    let scale = F::from_f64_lossy(2.0 / count);
    let levels = student
        .levels()
        .iter()
        .zip(teacher.levels())
        .map(|(s, t)| (s - t) * scale)
        .collect();
    Ok((value, Some(FeatureBundle::new(levels, student.source()))))
}

/// Squared distance between feature bundles summed over all levels and
/// divided by the total element count.
pub fn feature_l2<F: Real>(student: &FeatureBundle<F>, teacher: &FeatureBundle<F>) -> Result<f64> {
    Ok(l2_impl(student, teacher, false)?.0)
}

/// [`feature_l2`] and its gradient with respect to the student features.
pub fn feature_l2_with_grad<F: Real>(
    student: &FeatureBundle<F>,
    teacher: &FeatureBundle<F>,
) -> Result<(f64, FeatureBundle<F>)> {
    let (v, g) = l2_impl(student, teacher, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Gradients of one modality's combined loss with respect to its student
/// outputs.
#[derive(Debug, Clone)]
pub struct ModalityLossGrads<F> {
    pub logits: Array4<F>,
    pub bundle: Option<FeatureBundle<F>>,
}

#[allow(clippy::too_many_arguments)]
fn modality_loss_impl<F: Real>(
    labels: &LabelMap,
    fused_logits: &Array4<F>,
    student_logits: &Array4<F>,
    student_bundle: &FeatureBundle<F>,
    fused_bundle: &FeatureBundle<F>,
    w: &LossWeights,
    want_grad: bool,
) -> Result<(ModalityLoss, Option<ModalityLossGrads<F>>)> {
    let (dc_parts, dc_grad) = dice_ce_impl(labels, student_logits, w.dice_epsilon, want_grad)?;
    let (kl, kl_grad) = kl_impl(
        fused_logits,
        student_logits,
        w.temperature,
        want_grad && w.lambda_kl > 0.0,
    )?;
    let (l2, l2_grad) = l2_impl(student_bundle, fused_bundle, want_grad && w.gamma_l2 > 0.0)?;
    let dice_ce = dc_parts.total();
    let record = ModalityLoss {
        dice_ce,
        kl,
        feature_l2: l2,
        combined: dice_ce + w.lambda_kl * kl + w.gamma_l2 * l2,
    };
    if !want_grad {
        return Ok((record, None));
    }
    let mut logits = dc_grad.expect("gradient requested");
    if let Some(g) = kl_grad {
        logits.scaled_add(F::from_f64_lossy(w.lambda_kl), &g);
    }
    let bundle = l2_grad.map(|g| g.scaled(F::from_f64_lossy(w.gamma_l2)));
    Ok((record, Some(ModalityLossGrads { logits, bundle })))
}

/// Combined self-distillation loss of one modality:
/// `DC(y; student) + lambda * KL(fused || student) + gamma * L2(F_i, F_fused)`.
pub fn modality_loss<F: Real>(
    labels: &LabelMap,
    fused_logits: &Array4<F>,
    student_logits: &Array4<F>,
    student_bundle: &FeatureBundle<F>,
    fused_bundle: &FeatureBundle<F>,
    weights: &LossWeights,
) -> Result<ModalityLoss> {
    Ok(modality_loss_impl(
        labels,
        fused_logits,
        student_logits,
        student_bundle,
        fused_bundle,
        weights,
        false,
    )?
    .0)
}

pub fn modality_loss_with_grad<F: Real>(
    labels: &LabelMap,
    fused_logits: &Array4<F>,
    student_logits: &Array4<F>,
    student_bundle: &FeatureBundle<F>,
    fused_bundle: &FeatureBundle<F>,
    weights: &LossWeights,
) -> Result<(ModalityLoss, ModalityLossGrads<F>)> {
    let (r, g) = modality_loss_impl(
        labels,
        fused_logits,
        student_logits,
        student_bundle,
        fused_bundle,
        weights,
        true,
    )?;
    Ok((r, g.expect("gradient requested")))
}

fn mag_loss_impl<F: Real>(
    labels: &LabelMap,
    outputs: &ForwardAll<F>,
    w: &LossWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ForwardAllGrads<F>>)> {
    let m = outputs.modality_logits.len();
    if m == 0 || outputs.modality_bundles.len() != m {
        return Err(MagError::Precondition(format!(
            "incomplete forward outputs: {} logits, {} bundles",
            m,
            outputs.modality_bundles.len()
        )));
    }
    let (fused_parts, fused_grad) =
        dice_ce_impl(labels, &outputs.fused_logits, w.dice_epsilon, want_grad)?;
    let mut grads = ForwardAllGrads::empty(m);
    grads.fused_logits = fused_grad;
    let mut per_modality = Vec::with_capacity(m);
    for i in 0..m {
        let (record, g) = modality_loss_impl(
            labels,
            &outputs.fused_logits,
            &outputs.modality_logits[i],
            &outputs.modality_bundles[i],
            &outputs.fused_bundle,
            w,
            want_grad,
        )?;
        per_modality.push(record);
        if let Some(g) = g {
            grads.modality_logits[i] = Some(g.logits);
            grads.modality_bundles[i] = g.bundle;
        }
    }
    let fused_dice_ce = fused_parts.total();
    let total = per_modality
        .iter()
        .fold(fused_dice_ce, |acc, r| acc + r.combined);
    let breakdown = LossBreakdown {
        fused_dice_ce,
        per_modality,
        total,
    };
    Ok((breakdown, want_grad.then_some(grads)))
}

/// `DC(y; fused) + sum_i modality_loss_i`.
pub fn mag_loss<F: Real>(
    labels: &LabelMap,
    outputs: &ForwardAll<F>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(mag_loss_impl(labels, outputs, weights, false)?.0)
}

/// [`mag_loss`] and the upstream gradients to feed
/// [`crate::model::MagModel::backward_all`].
pub fn mag_loss_with_grad<F: Real>(
    labels: &LabelMap,
    outputs: &ForwardAll<F>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, ForwardAllGrads<F>)> {
    let (b, g) = mag_loss_impl(labels, outputs, weights, true)?;
    Ok((b, g.expect("gradient requested")))
}
