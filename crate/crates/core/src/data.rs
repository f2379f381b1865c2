//! Synthetic multi-modal phantoms and the raw-binary dataset format.
//!
//! Each subject is a set of non-overlapping ellipsoids, one per foreground
//! class. Modality `m` renders class `c` with contrast `visibility[m][c]`
//! plus Gaussian noise, so which structures a modality can see is fully
//! controlled by the visibility matrix.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MagError, Result};
use crate::rng::stream;
use crate::types::{LabelMap, ModalitySet, ModalityVolume};

pub const FORMAT_VERSION: u32 = 1;
const MIN_PREVALENCE: f64 = 0.01;
const MAX_PREVALENCE: f64 = 0.20;

/// Aligned volumes for every modality of one subject plus the composite labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSample {
    pub subject_id: String,
    /// Indexed by modality index.
    volumes: Vec<ModalityVolume>,
    labels: LabelMap,
}

impl MultiModalSample {
    pub fn new(
        subject_id: impl Into<String>,
        volumes: Vec<ModalityVolume>,
        labels: LabelMap,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        let Some(first) = volumes.first() else {
            return Err(MagError::Data(format!(
                "subject {subject_id} has no volumes"
            )));
        };
        let (shape, spacing) = (first.shape(), first.spacing);
        for (i, v) in volumes.iter().enumerate() {
            if v.modality.index != i {
                return Err(MagError::Data(format!(
                    "subject {subject_id}: volume {i} carries modality index {}",
                    v.modality.index
                )));
            }
            if v.shape() != shape || v.spacing != spacing {
                return Err(MagError::Dimension(format!(
                    "subject {subject_id}: modality {} has shape {:?}/spacing {:?}, expected {shape:?}/{spacing:?}",
                    v.modality.name,
                    v.shape(),
                    v.spacing
                )));
            }
        }
        if labels.shape() != shape {
            return Err(MagError::Dimension(format!(
                "subject {subject_id}: labels have shape {:?}, volumes {shape:?}",
                labels.shape()
            )));
        }
        Ok(Self {
            subject_id,
            volumes,
            labels,
        })
    }

    pub fn volume(&self, index: usize) -> Result<&ModalityVolume> {
        self.volumes.get(index).ok_or_else(|| {
            MagError::Data(format!(
                "subject {} has no volume for modality index {index}",
                self.subject_id
            ))
        })
    }

    pub fn volumes(&self) -> &[ModalityVolume] {
        &self.volumes
    }

    pub fn num_modalities(&self) -> usize {
        self.volumes.len()
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn shape(&self) -> [usize; 3] {
        self.labels.shape()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.volumes[0].spacing
    }

    /// Mirrors every volume and the labels along the selected axes.
    pub fn flipped(&self, axes: [bool; 3]) -> Self {
        if !axes.iter().any(|&a| a) {
            return self.clone();
        }
        let volumes = self
            .volumes
            .iter()
            .map(|v| ModalityVolume {
                modality: v.modality.clone(),
                voxels: flip(&v.voxels, axes),
                spacing: v.spacing,
            })
            .collect();
        let labels = LabelMap::new(flip(self.labels.classes(), axes), self.labels.num_classes())
            .expect("flipping preserves label range");
        Self {
            subject_id: self.subject_id.clone(),
            volumes,
            labels,
        }
    }

    /// Reorders (and narrows) the volumes to match `target`, matching by name.
    pub fn restricted_to(&self, own: &ModalitySet, target: &ModalitySet) -> Result<Self> {
        let volumes = target
            .ids()
            .iter()
            .map(|id| {
                let src = own.by_name(&id.name).map_err(|_| {
                    MagError::Data(format!(
                        "subject {} lacks modality {}",
                        self.subject_id, id.name
                    ))
                })?;
                let v = &self.volumes[src.index];
                Ok(ModalityVolume {
                    modality: id.clone(),
                    voxels: v.voxels.clone(),
                    spacing: v.spacing,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.subject_id.clone(), volumes, self.labels.clone())
    }
}

fn flip<T: Clone>(a: &Array3<T>, axes: [bool; 3]) -> Array3<T> {
    let mut v = a.view();
    for (axis, &f) in axes.iter().enumerate() {
        if f {
            v.invert_axis(ndarray::Axis(axis));
        }
    }
    v.to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = MagError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(MagError::Usage(format!("unknown split {other:?}"))),
        }
    }
}

/// Train/val/test counts following a 12/2/4 ratio; at least one test
/// subject once there are two or more subjects.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    if n < 2 {
        return (n, 0, 0);
    }
    let test = ((n as f64 * 4.0 / 18.0).round() as usize).max(1);
    let val = (n as f64 * 2.0 / 18.0).round() as usize;
    let val = val.min(n - test - 1);
    (n - test - val, val, test)
}

fn default_splits(n: usize) -> Vec<Split> {
    let (train, val, _) = split_counts(n);
    (0..n)
        .map(|i| {
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect()
}

/// Parameters of the synthetic phantom generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub modalities: Vec<String>,
    pub grid: [usize; 3],
    /// Background plus foreground classes.
    pub num_classes: usize,
    /// `visibility[m][c]`: intensity of class `c` in modality `m`.
    pub visibility: Vec<Vec<f32>>,
    pub noise_sigma: f32,
    pub spacing: [f64; 3],
    pub seed: u64,
}

pub fn default_modality_names(m: usize) -> Vec<String> {
    const NAMES: [&str; 4] = ["T1", "T2", "T1c", "FLAIR"];
    if m <= NAMES.len() {
        NAMES[..m].iter().map(|s| s.to_string()).collect()
    } else {
        (0..m).map(|i| format!("M{i}")).collect()
    }
}

impl PhantomSpec {
    /// Modality `m` (for `m < fg`, with `fg` foreground classes) shows
    /// foreground class `m + 1` at full contrast, the next class at half
    /// contrast and hides the rest, so no single modality separates every
    /// structure. Further modalities show every structure at 0.4. A single
    /// modality shows all structures at graded levels `1, (fg-1)/fg, ...`.
    pub fn standard(num_modalities: usize, num_classes: usize, size: usize, seed: u64) -> Self {
        let fg = num_classes.saturating_sub(1).max(1);
        let visibility = (0..num_modalities)
            .map(|m| {
                let mut row = vec![0.0f32; num_classes];
                for (c, v) in row.iter_mut().enumerate().skip(1) {
                    let rank = (c - 1 + fg - m % fg) % fg;
                    *v = if num_modalities == 1 {
                        (fg - rank) as f32 / fg as f32
                    } else if m >= fg && fg > 1 {
                        0.4
                    } else {
                        match rank {
                            0 => 1.0,
                            1 => 0.5,
                            _ => 0.0,
                        }
                    };
                }
                row
            })
            .collect();
        Self {
            modalities: default_modality_names(num_modalities),
            grid: [size; 3],
            num_classes,
            visibility,
            noise_sigma: 0.1,
            spacing: [1.0; 3],
            seed,
        }
    }

    /// Modality `k` shows only foreground class `k + 1`; `num_classes` is
    /// `num_modalities + 1`.
    pub fn complementary(num_modalities: usize, size: usize, seed: u64) -> Self {
        let num_classes = num_modalities + 1;
        let visibility = (0..num_modalities)
            .map(|m| {
                (0..num_classes)
                    .map(|c| if c == m + 1 { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self {
            modalities: default_modality_names(num_modalities),
            grid: [size; 3],
            num_classes,
            visibility,
            noise_sigma: 0.1,
            spacing: [1.0; 3],
            seed,
        }
    }

    pub fn modality_set(&self) -> Result<ModalitySet> {
        ModalitySet::new(&self.modalities)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modalities.len();
        if m == 0 {
            return Err(MagError::Config(
                "phantom needs at least one modality".into(),
            ));
        }
        self.modality_set()?;
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(MagError::Config(format!(
                "num_classes {} outside 2..=255",
                self.num_classes
            )));
        }
        if self.grid.iter().any(|&g| g < 4) {
            return Err(MagError::Config(format!("grid {:?} too small", self.grid)));
        }
        if self.visibility.len() != m || self.visibility.iter().any(|r| r.len() != self.num_classes)
        {
            return Err(MagError::Config(format!(
                "visibility must be {m}x{} (modalities x classes)",
                self.num_classes
            )));
        }
        if self
            .visibility
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(MagError::Config(
                "visibility entries must lie in [0, 1]".into(),
            ));
        }
        let sees = |m: usize, c: usize| self.visibility[m][c] != self.visibility[m][0];
        for (mi, name) in self.modalities.iter().enumerate() {
            if !(1..self.num_classes).any(|c| sees(mi, c)) {
                return Err(MagError::Config(format!(
                    "modality {name} sees no foreground class"
                )));
            }
        }
        for c in 1..self.num_classes {
            if !(0..m).any(|mi| sees(mi, c)) {
                return Err(MagError::Config(format!(
                    "class {c} is invisible in every modality"
                )));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(MagError::Config("noise_sigma must be >= 0".into()));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(MagError::Config(format!(
                "invalid spacing {:?}",
                self.spacing
            )));
        }
        Ok(())
    }
}

/// A collection of subjects sharing modalities, grid and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modalities: ModalitySet,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub num_classes: usize,
    pub samples: Vec<MultiModalSample>,
    pub splits: Vec<Split>,
    pub generator: Option<PhantomSpec>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<&MultiModalSample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(x, _)| x)
            .collect()
    }

    pub fn split_owned(&self, which: Split) -> Vec<MultiModalSample> {
        self.split(which).into_iter().cloned().collect()
    }

    /// Returns a dataset whose modalities are exactly `target`, in its order.
    pub fn restricted_to(&self, target: &ModalitySet) -> Result<Self> {
        for id in target.ids() {
            if self.modalities.by_name(&id.name).is_err() {
                return Err(MagError::Config(format!(
                    "dataset has no modality {} (available: {})",
                    id.name,
                    self.modalities.names().join(", ")
                )));
            }
        }
        let samples = self
            .samples
            .iter()
            .map(|s| s.restricted_to(&self.modalities, target))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            modalities: target.clone(),
            samples,
            ..self.clone()
        })
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3], grow: f64) -> bool {
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 - self.center[a]) / (self.radii[a] + grow);
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }

    fn bounds(&self, axis: usize, grow: f64, n: usize) -> (usize, usize) {
        let r = self.radii[axis] + grow;
        let lo = (self.center[axis] - r).floor().max(0.0) as usize;
        let hi = ((self.center[axis] + r).ceil() as usize + 1).min(n);
        (lo, hi)
    }

    fn voxels(&self, grid: [usize; 3], grow: f64) -> Vec<[usize; 3]> {
        let (z0, z1) = self.bounds(0, grow, grid[0]);
        let (y0, y1) = self.bounds(1, grow, grid[1]);
        let (x0, x1) = self.bounds(2, grow, grid[2]);
        let mut out = Vec::new();
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    if self.contains([z, y, x], grow) {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

fn place_labels<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Option<Array3<u8>> {
    let grid = spec.grid;
    let total = (grid[0] * grid[1] * grid[2]) as f64;
    let mut labels = Array3::<u8>::zeros(grid);
    for class in 1..spec.num_classes {
        let mut placed = false;
        for _ in 0..200 {
            let radii = grid.map(|g| (rng.random_range(0.14..0.26) * g as f64).max(1.0));
            let mut center = [0.0; 3];
            for a in 0..3 {
                let lo = radii[a];
                let hi = grid[a] as f64 - 1.0 - radii[a];
                if hi <= lo {
                    return None;
                }
                center[a] = rng.random_range(lo..hi);
            }
            let e = Ellipsoid { center, radii };
            let body = e.voxels(grid, 0.0);
            let prevalence = body.len() as f64 / total;
            if !(MIN_PREVALENCE..=MAX_PREVALENCE).contains(&prevalence) {
                continue;
            }
            // one voxel of clearance from every other structure
            if e.voxels(grid, 1.0).iter().any(|&p| labels[p] != 0) {
                continue;
            }
            for p in body {
                labels[p] = class as u8;
            }
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(labels)
}

fn generate_subject(
    spec: &PhantomSpec,
    set: &ModalitySet,
    index: usize,
) -> Result<MultiModalSample> {
    let mut rng = stream(spec.seed, "phantom-layout", index as u64);
    let labels = (0..50)
        .find_map(|_| place_labels(spec, &mut rng))
        .ok_or_else(|| {
            MagError::Generation(format!(
                "could not pack {} structures into grid {:?} for subject {index}",
                spec.num_classes - 1,
                spec.grid
            ))
        })?;
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let volumes = set
        .ids()
        .iter()
        .map(|id| {
            let mut noise = stream(
                spec.seed,
                &format!("phantom-noise-{}", id.index),
                index as u64,
            );
            let row = &spec.visibility[id.index];
            let voxels =
                labels.mapv(|c| row[c as usize] + spec.noise_sigma * normal.sample(&mut noise));
            ModalityVolume::new(id.clone(), voxels, spec.spacing)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = LabelMap::new(labels, spec.num_classes)?;
    MultiModalSample::new(format!("subject_{index:03}"), volumes, labels)
}

/// Generates `n_subjects` phantoms, deterministic per `(seed, subject index)`.
pub fn generate_phantom(spec: &PhantomSpec, n_subjects: usize) -> Result<Dataset> {
    if n_subjects < 1 {
        return Err(MagError::Config("need at least one subject".into()));
    }
    spec.validate()?;
    let set = spec.modality_set()?;
    let samples = (0..n_subjects)
        .map(|i| generate_subject(spec, &set, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        modalities: set,
        shape: spec.grid,
        spacing: spec.spacing,
        num_classes: spec.num_classes,
        splits: default_splits(n_subjects),
        samples,
        generator: Some(spec.clone()),
    })
}

/// Fraction of voxels carrying each class.
pub fn class_prevalence(labels: &LabelMap) -> Vec<f64> {
    let mut counts = vec![0usize; labels.num_classes()];
    for &c in labels.classes() {
        counts[c as usize] += 1;
    }
    counts
        .iter()
        .map(|&n| n as f64 / labels.len() as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectEntry {
    id: String,
    split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    modalities: Vec<String>,
    shape: [usize; 3],
    spacing: [f64; 3],
    num_classes: usize,
    generator: Option<PhantomSpec>,
    subjects: Vec<SubjectEntry>,
}

pub fn volume_file_name(subject: &str, modality: &str) -> String {
    format!("{subject}_{modality}.f32")
}

pub fn label_file_name(subject: &str) -> String {
    format!("{subject}_labels.u8")
}

/// Writes `manifest.json` plus one raw file per volume and per label map.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MagError::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        modalities: dataset.modalities.names(),
        shape: dataset.shape,
        spacing: dataset.spacing,
        num_classes: dataset.num_classes,
        generator: dataset.generator.clone(),
        subjects: dataset
            .samples
            .iter()
            .zip(&dataset.splits)
            .map(|(s, &split)| SubjectEntry {
                id: s.subject_id.clone(),
                split,
            })
            .collect(),
    };
    for sample in &dataset.samples {
        for v in sample.volumes() {
            let path = dir.join(volume_file_name(&sample.subject_id, &v.modality.name));
            let mut bytes = Vec::with_capacity(v.voxels.len() * 4);
            for x in v.voxels.iter() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            fs::write(&path, bytes).map_err(|e| MagError::io(&path, e))?;
        }
        let path = dir.join(label_file_name(&sample.subject_id));
        let bytes: Vec<u8> = sample.labels().classes().iter().copied().collect();
        fs::write(&path, bytes).map_err(|e| MagError::io(&path, e))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, text).map_err(|e| MagError::io(&path, e))
}

fn read_bytes(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| MagError::load(path, e.to_string()))?;
    if bytes.len() != expected {
        return Err(MagError::load(
            path,
            format!(
                "file holds {} bytes, manifest implies {expected}",
                bytes.len()
            ),
        ));
    }
    Ok(bytes)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| MagError::load(&manifest_path, e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| MagError::load(&manifest_path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(MagError::load(
            &manifest_path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let set = ModalitySet::new(&manifest.modalities)
        .map_err(|e| MagError::load(&manifest_path, e.to_string()))?;
    let shape = manifest.shape;
    let n = shape[0] * shape[1] * shape[2];
    let mut samples = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let mut volumes = Vec::with_capacity(set.len());
        for id in set.ids() {
            let path = dir.join(volume_file_name(&entry.id, &id.name));
            let bytes = read_bytes(&path, n * 4)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let voxels = Array3::from_shape_vec(shape, data).expect("length checked");
            volumes.push(
                ModalityVolume::new(id.clone(), voxels, manifest.spacing)
                    .map_err(|e| MagError::load(&path, e.to_string()))?,
            );
        }
        let path = dir.join(label_file_name(&entry.id));
        let bytes = read_bytes(&path, n)?;
        let labels = LabelMap::new(
            Array3::from_shape_vec(shape, bytes).expect("length checked"),
            manifest.num_classes,
        )
        .map_err(|e| MagError::load(&path, e.to_string()))?;
        samples.push(MultiModalSample::new(entry.id.clone(), volumes, labels)?);
    }
    Ok(Dataset {
        modalities: set,
        shape,
        spacing: manifest.spacing,
        num_classes: manifest.num_classes,
        splits: manifest.subjects.iter().map(|s| s.split).collect(),
        samples,
        generator: manifest.generator,
    })
}

/// Reads a dataset and narrows it to `modalities`, rejecting manifests that
/// lack any of them.
pub fn read_dataset_for(dir: &Path, modalities: &ModalitySet) -> Result<Dataset> {
    let dataset = read_dataset(dir)?;
    dataset
        .restricted_to(modalities)
        .map_err(|e| MagError::load(dir.join("manifest.json"), e.to_string()))
}
