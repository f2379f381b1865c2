//! Numerical checks of the entropy bound behind modality-agnostic
//! self-distillation.
//!
//! In scalar form, with likelihoods `0 < p_S < p_M <= 1` of the subset and
//! full-modality predictions, `h(p) = -p ln p` and
//! `d = p_M ln(p_M / p_S)`, the bound reads `h(p_S) < h(p_M) + d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{MagError, Result};
use crate::losses::{mean_entropy, pixel_kl};
use crate::rng::stream;
use crate::training::{SubsetPredictor, TrainState};
use crate::types::ModalitySubset;

/// Likelihoods of the full-modality (`p_m`) and subset (`p_s`) predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarLikelihoodPair {
    p_m: f64,
    p_s: f64,
}

impl ScalarLikelihoodPair {
    /// Requires `0 < p_s < p_m <= 1`.
    pub fn new(p_m: f64, p_s: f64) -> Result<Self> {
        if !(p_m > 0.0 && p_m <= 1.0) {
            return Err(MagError::Domain(format!(
                "p_M must lie in (0, 1], got {p_m}"
            )));
        }
        if !(p_s > 0.0 && p_s < 1.0) {
            return Err(MagError::Domain(format!(
                "p_S must lie in (0, 1), got {p_s}"
            )));
        }
        if p_m <= p_s {
            return Err(MagError::Domain(format!(
                "need p_M > p_S, got p_M={p_m}, p_S={p_s}"
            )));
        }
        Ok(Self { p_m, p_s })
    }

    pub fn p_m(&self) -> f64 {
        self.p_m
    }

    pub fn p_s(&self) -> f64 {
        self.p_s
    }
}

impl std::str::FromStr for ScalarLikelihoodPair {
    type Err = MagError;

    /// Parses `p_M:p_S`, e.g. `0.9:0.6`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| MagError::Usage(format!("expected p_M:p_S, got {s:?}")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| MagError::Usage(format!("not a number: {t:?}")))
        };
        Self::new(parse(a)?, parse(b)?).map_err(|e| MagError::Usage(e.to_string()))
    }
}

/// Both sides of the bound for one pair, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub p_m: f64,
    pub p_s: f64,
    pub h_s: f64,
    pub h_m: f64,
    pub d_kl: f64,
    pub bound: f64,
    pub holds: bool,
}

fn h(p: f64) -> f64 {
    (p * p.ln()).abs()
}

pub fn verify_entropy_bound(pair: ScalarLikelihoodPair) -> BoundCheck {
    let (p_m, p_s) = (pair.p_m, pair.p_s);
    let h_s = h(p_s);
    let h_m = h(p_m);
    let d_kl = p_m * (p_m.ln() - p_s.ln());
    let bound = h_m + d_kl;
    BoundCheck {
        p_m,
        p_s,
        h_s,
        h_m,
        d_kl,
        bound,
        holds: h_s < bound,
    }
}

/// Draws `n` pairs uniformly from `{0 < p_S < p_M < 1}` and returns the
/// fraction for which the bound holds.
pub fn sweep_bound(n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(MagError::Config("sweep needs n >= 1".into()));
    }
    let mut rng = stream(seed, "theory-sweep", 0);
    let mut holding = 0usize;
    let mut drawn = 0usize;
    while drawn < n {
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        let Ok(pair) = ScalarLikelihoodPair::new(a.max(b), a.min(b)) else {
            continue;
        };
        drawn += 1;
        if verify_entropy_bound(pair).holds {
            holding += 1;
        }
    }
    Ok(holding as f64 / n as f64)
}

/// Subset-prediction statistics of one model on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmBound {
    pub arm: String,
    pub lambda_kl: f64,
    pub gamma_l2: f64,
    /// Mean per-voxel entropy of the subset prediction (nats).
    pub mean_entropy: f64,
    /// Mean per-voxel KL(fused || subset) (nats).
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TighteningComparison {
    pub subset: String,
    pub subjects: usize,
    pub with_distillation: ArmBound,
    pub without_distillation: ArmBound,
}

impl TighteningComparison {
    /// Positive when the distilled model has the smaller KL term.
    pub fn kl_reduction(&self) -> f64 {
        self.without_distillation.mean_kl - self.with_distillation.mean_kl
    }

    pub fn entropy_reduction(&self) -> f64 {
        self.without_distillation.mean_entropy - self.with_distillation.mean_entropy
    }
}

fn arm_bound(
    state: &TrainState,
    dataset: &Dataset,
    subset: &ModalitySubset,
) -> Result<(ArmBound, usize)> {
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(MagError::Config("dataset has no test subjects".into()));
    }
    let full = state.modalities().full()?;
    let (mut entropy, mut kl) = (0.0, 0.0);
    for sample in &test {
        let fused = state.predict(sample, &full)?;
        let sub = state.predict(sample, subset)?;
        entropy += mean_entropy(&sub)?;
        kl += pixel_kl(&fused, &sub, 1.0)?;
    }
    let n = test.len() as f64;
    Ok((
        ArmBound {
            arm: state.arm.name().to_string(),
            lambda_kl: state.config.lambda_kl,
            gamma_l2: state.config.gamma_l2,
            mean_entropy: entropy / n,
            mean_kl: kl / n,
        },
        test.len(),
    ))
}

/// Compares subset entropy and KL(fused || subset) between a model trained
/// with distillation and one trained without. The two configurations must
/// agree in everything except the distillation weights.
pub fn distillation_tightens_bound(
    with: &TrainState,
    without: &TrainState,
    dataset: &Dataset,
    subset: &ModalitySubset,
) -> Result<TighteningComparison> {
    let strip = |s: &TrainState| {
        let mut c = s.config.clone();
        c.lambda_kl = 0.0;
        c.gamma_l2 = 0.0;
        c
    };
    if strip(with) != strip(without) {
        return Err(MagError::Comparison(format!(
            "configurations differ beyond the distillation weights ({} vs {})",
            with.config.hash(),
            without.config.hash()
        )));
    }
    for s in [with, without] {
        if !matches!(s.model, crate::training::ArmModel::Fused(_)) {
            return Err(MagError::Comparison(format!(
                "arm {} has no fused branch to compare against",
                s.arm.name()
            )));
        }
    }
    let (a, subjects) = arm_bound(with, dataset, subset)?;
    let (b, _) = arm_bound(without, dataset, subset)?;
    Ok(TighteningComparison {
        subset: subset.label(with.modalities()),
        subjects,
        with_distillation: a,
        without_distillation: b,
    })
}
