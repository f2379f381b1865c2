//! Shared domain vocabulary: modalities, subsets, volumes, label maps and the
//! experiment configuration.

use std::fmt;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MagError, Result};

/// One imaging modality, identified by its position in the configured set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityId {
    pub index: usize,
    pub name: String,
}

/// The ordered, contiguous set of modalities a model was configured with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySet {
    ids: Vec<ModalityId>,
}

impl ModalitySet {
    /// Builds a set from names; index `i` is assigned to `names[i]`.
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut ids = Vec::with_capacity(names.len());
        for (index, name) in names.iter().enumerate() {
            let name = name.as_ref();
            if name.is_empty() {
                return Err(MagError::Config(format!(
                    "modality {index} has an empty name"
                )));
            }
            if ids.iter().any(|id: &ModalityId| id.name == name) {
                return Err(MagError::Config(format!(
                    "duplicate modality name {name:?}"
                )));
            }
            ids.push(ModalityId {
                index,
                name: name.to_string(),
            });
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ModalityId] {
        &self.ids
    }

    pub fn get(&self, index: usize) -> Option<&ModalityId> {
        self.ids.get(index)
    }

    pub fn by_name(&self, name: &str) -> Result<&ModalityId> {
        self.ids
            .iter()
            .find(|id| id.name == name)
            .ok_or_else(|| MagError::Lookup {
                kind: "modality",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> Vec<String> {
        self.ids.iter().map(|id| id.name.clone()).collect()
    }

    /// The subset containing every modality.
    pub fn full(&self) -> Result<ModalitySubset> {
        ModalitySubset::new(self, (0..self.len()).collect::<Vec<_>>())
    }
}

/// A non-empty subset of a [`ModalitySet`], iterated in ascending index order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalitySubset {
    members: Vec<usize>,
    set_size: usize,
}

impl ModalitySubset {
    pub fn new(set: &ModalitySet, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut members: Vec<usize> = indices.into_iter().collect();
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(MagError::Precondition(
                "modality subset must be non-empty".into(),
            ));
        }
        if let Some(&bad) = members.iter().find(|&&i| i >= set.len()) {
            return Err(MagError::Lookup {
                kind: "modality index",
                name: bad.to_string(),
            });
        }
        Ok(Self {
            members,
            set_size: set.len(),
        })
    }

    /// Bit `i` of `mask` selects modality `i`.
    pub fn from_mask(set: &ModalitySet, mask: u64) -> Result<Self> {
        Self::new(set, (0..set.len()).filter(|i| mask >> i & 1 == 1))
    }

    pub fn from_names<S: AsRef<str>>(set: &ModalitySet, names: &[S]) -> Result<Self> {
        let indices = names
            .iter()
            .map(|n| set.by_name(n.as_ref()).map(|id| id.index))
            .collect::<Result<Vec<_>>>()?;
        Self::new(set, indices)
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.members.binary_search(&index).is_ok()
    }

    pub fn is_full(&self) -> bool {
        self.members.len() == self.set_size
    }

    pub fn mask(&self) -> u64 {
        self.members.iter().fold(0, |acc, &i| acc | 1 << i)
    }

    /// Availability flags, one per modality of the parent set.
    pub fn availability(&self) -> Vec<bool> {
        (0..self.set_size).map(|i| self.contains(i)).collect()
    }

    /// Human-readable label such as `T1+T2`.
    pub fn label(&self, set: &ModalitySet) -> String {
        self.members
            .iter()
            .map(|&i| {
                set.get(i)
                    .map_or_else(|| format!("m{i}"), |id| id.name.clone())
            })
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl fmt::Display for ModalitySubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.members.iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// All `2^|M| - 1` non-empty subsets, ordered by cardinality and then
/// lexicographically by modality index.
pub fn enumerate_subsets(set: &ModalitySet) -> Result<Vec<ModalitySubset>> {
    let m = set.len();
    if m == 0 {
        return Err(MagError::Config("modality set is empty".into()));
    }
    if m > 16 {
        return Err(MagError::Config(format!(
            "{m} modalities is too many to enumerate"
        )));
    }
    let mut subsets = Vec::with_capacity((1usize << m) - 1);
    for k in 1..=m {
        let mut combo: Vec<usize> = (0..k).collect();
        loop {
            subsets.push(ModalitySubset {
                members: combo.clone(),
                set_size: m,
            });
            // advance to the next k-combination in lexicographic order
            let Some(pos) = (0..k).rev().find(|&i| combo[i] < m - k + i) else {
                break;
            };
            combo[pos] += 1;
            for j in pos + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    Ok(subsets)
}

/// One modality's 3D image for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityVolume {
    pub modality: ModalityId,
    pub voxels: Array3<f32>,
    /// Voxel edge lengths in mm along (D, H, W).
    pub spacing: [f64; 3],
}

impl ModalityVolume {
    pub fn new(modality: ModalityId, voxels: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        if let Some(bad) = voxels.iter().find(|v| !v.is_finite()) {
            return Err(MagError::Numeric(format!(
                "volume for modality {} contains non-finite value {bad}",
                modality.name
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(MagError::Config(format!(
                "invalid voxel spacing {spacing:?}"
            )));
        }
        Ok(Self {
            modality,
            voxels,
            spacing,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }
}

/// A composite label map with values in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    classes: Array3<u8>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(classes: Array3<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > 255 {
            return Err(MagError::Config(format!(
                "num_classes {num_classes} outside 1..=255"
            )));
        }
        if let Some(bad) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(MagError::Data(format!(
                "label value {bad} is not below num_classes {num_classes}"
            )));
        }
        Ok(Self {
            classes,
            num_classes,
        })
    }

    pub fn classes(&self) -> &Array3<u8> {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.classes.shape();
        [s[0], s[1], s[2]]
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn into_inner(self) -> Array3<u8> {
        self.classes
    }
}

/// Widths of the tiny convolutional backbone. `widths[0]` is the full
/// resolution level; each further entry adds one stride-2 stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
}

impl BackboneConfig {
    /// Number of downsampling stages.
    pub fn depth(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 8, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            iterations: 200,
            batch_size: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modalities: Vec<String>,
    pub num_classes: usize,
    /// Weight of the pixel-wise KL distillation term.
    pub lambda_kl: f64,
    /// Weight of the feature L2 distillation term.
    pub gamma_l2: f64,
    pub kl_temperature: f64,
    pub backbone: BackboneConfig,
    pub optimizer: OptimizerConfig,
    /// Smoothing constant of the soft Dice term.
    pub dice_epsilon: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            modalities: ["T1", "T2", "T1c", "FLAIR"].map(String::from).to_vec(),
            num_classes: 4,
            lambda_kl: 1.0,
            gamma_l2: 1.0,
            kl_temperature: 1.0,
            backbone: BackboneConfig::default(),
            optimizer: OptimizerConfig::default(),
            dice_epsilon: 1e-5,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let set = self.modality_set()?;
        if set.is_empty() {
            return Err(MagError::Config("at least one modality is required".into()));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(MagError::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if !(self.lambda_kl >= 0.0 && self.lambda_kl.is_finite()) {
            return Err(MagError::Config(format!(
                "lambda_kl must be >= 0, got {}",
                self.lambda_kl
            )));
        }
        if !(self.gamma_l2 >= 0.0 && self.gamma_l2.is_finite()) {
            return Err(MagError::Config(format!(
                "gamma_l2 must be >= 0, got {}",
                self.gamma_l2
            )));
        }
        if !(self.kl_temperature > 0.0 && self.kl_temperature.is_finite()) {
            return Err(MagError::Config(format!(
                "kl_temperature must be > 0, got {}",
                self.kl_temperature
            )));
        }
        if !(self.dice_epsilon >= 0.0 && self.dice_epsilon.is_finite()) {
            return Err(MagError::Config("dice_epsilon must be >= 0".into()));
        }
        if self.backbone.widths.len() < 2 || self.backbone.widths.contains(&0) {
            return Err(MagError::Config(format!(
                "backbone needs at least two non-zero widths, got {:?}",
                self.backbone.widths
            )));
        }
        let opt = &self.optimizer;
        if opt.iterations < 1 {
            return Err(MagError::Config("iterations must be >= 1".into()));
        }
        if opt.batch_size < 1 {
            return Err(MagError::Config("batch_size must be >= 1".into()));
        }
        if !(opt.learning_rate > 0.0 && opt.learning_rate.is_finite()) {
            return Err(MagError::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn modality_set(&self) -> Result<ModalitySet> {
        ModalitySet::new(&self.modalities)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MagError::io(path, e))?;
        Self::from_json(&text).map_err(|e| MagError::load(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| MagError::io(path, e))
    }

    /// Stable short digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
