//! Overlap and surface-distance metrics on label maps.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MagError, Result};
use crate::nn::Real;
use crate::types::LabelMap;

fn check_shapes(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(MagError::Dimension(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Per-class Dice for classes `0..num_classes`: `2|P∩G| / (|P|+|G|)`, 1.0 when
/// both sets are empty and 0.0 when exactly one is.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<Vec<f64>> {
    check_shapes(pred, gt)?;
    let mut inter = vec![0usize; num_classes];
    let mut p = vec![0usize; num_classes];
    let mut g = vec![0usize; num_classes];
    for (&a, &b) in pred.classes().iter().zip(gt.classes().iter()) {
        let (a, b) = (a as usize, b as usize);
        if a < num_classes {
            p[a] += 1;
        }
        if b < num_classes {
            g[b] += 1;
        }
        if a == b && a < num_classes {
            inter[a] += 1;
        }
    }
    Ok((0..num_classes)
        .map(|c| match (p[c], g[c]) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            (pc, gc) => 2.0 * inter[c] as f64 / (pc + gc) as f64,
        })
        .collect())
}

/// Foreground voxels with at least one face neighbour that is background or
/// outside the volume.
pub fn boundary_voxels(mask: &Array3<bool>) -> Vec<[usize; 3]> {
    let sh = mask.shape();
    let (d, h, w) = (sh[0], sh[1], sh[2]);
    let mut out = Vec::new();
    for ((z, y, x), &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        let on_edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
        if on_edge
            || !mask[[z - 1, y, x]]
            || !mask[[z + 1, y, x]]
            || !mask[[z, y - 1, x]]
            || !mask[[z, y + 1, x]]
            || !mask[[z, y, x - 1]]
            || !mask[[z, y, x + 1]]
        {
            out.push([z, y, x]);
        }
    }
    out
}

/// Squared distance transform along one line (lower envelope of parabolas)
/// with sample spacing `step`.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let mut k = 0usize;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(start) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = start;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < pos(q) {
            j += 1;
        }
        let p = v[j];
        let d = pos(q) - pos(p);
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance (in physical units) from every voxel to
/// the nearest seed voxel.
pub fn squared_distance_to(
    seeds: &[[usize; 3]],
    shape: [usize; 3],
    spacing: [f64; 3],
) -> Array3<f64> {
    let mut g = Array3::from_elem(shape, f64::INFINITY);
    for s in seeds {
        g[*s] = 0.0;
    }
    let longest = shape.iter().copied().max().unwrap_or(0);
    let mut f = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    for (axis, &step) in spacing.iter().enumerate() {
        let n = shape[axis];
        for mut lane in g.lanes_mut(Axis(axis)) {
            for (dst, src) in f[..n].iter_mut().zip(lane.iter()) {
                *dst = *src;
            }
            edt_1d(&f[..n], step, &mut out[..n], &mut v[..n], &mut z[..n + 1]);
            for (dst, src) in lane.iter_mut().zip(&out[..n]) {
                *dst = *src;
            }
        }
    }
    g
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) at rank
/// `q/100 * (n - 1)` of the sorted values.
pub fn percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Some(values[lo] + (values[hi] - values[lo]) * frac)
}

/// 95th percentile of the pooled boundary-to-boundary distances of class `c`
/// in both directions, in physical units. `None` when either set is empty.
pub fn hd95(pred: &LabelMap, gt: &LabelMap, class: u8, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(MagError::Config(format!("invalid spacing {spacing:?}")));
    }
    let a = boundary_voxels(&pred.classes().mapv(|v| v == class));
    let b = boundary_voxels(&gt.classes().mapv(|v| v == class));
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let shape = pred.shape();
    let to_b = squared_distance_to(&b, shape, spacing);
    let to_a = squared_distance_to(&a, shape, spacing);
    let mut pooled: Vec<f64> = a
        .iter()
        .map(|p| to_b[*p].sqrt())
        .chain(b.iter().map(|p| to_a[*p].sqrt()))
        .collect();
    Ok(percentile(&mut pooled, 95.0))
}

/// Per-voxel argmax over channels; ties resolve to the lowest class index.
pub fn argmax_labels<F: Real>(logits: &Array4<F>) -> Result<LabelMap> {
    let c = logits.shape()[0];
    if c == 0 || c > 256 {
        return Err(MagError::Dimension(format!("cannot decode {c} classes")));
    }
    let sh = [logits.shape()[1], logits.shape()[2], logits.shape()[3]];
    let mut out = Array3::<u8>::zeros(sh);
    for ((z, y, x), o) in out.indexed_iter_mut() {
        let mut best = 0;
        for k in 1..c {
            if logits[[k, z, y, x]] > logits[[best, z, y, x]] {
                best = k;
            }
        }
        *o = best as u8;
    }
    LabelMap::new(out, c)
}

/// Metrics of one prediction; means are over foreground classes only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    /// Foreground classes `1..C`.
    pub per_class_dice: Vec<f64>,
    /// `None` where undefined.
    pub per_class_hd95: Vec<Option<f64>>,
    pub mean_dice: f64,
    /// Mean over the defined foreground HD95 values.
    pub mean_hd95: Option<f64>,
}

pub fn evaluate_prediction(
    pred: &LabelMap,
    gt: &LabelMap,
    spacing: [f64; 3],
) -> Result<MetricResult> {
    let c = gt.num_classes();
    let dice = dice_score(pred, gt, c)?;
    let per_class_dice = dice[1..].to_vec();
    let per_class_hd95 = (1..c)
        .map(|k| hd95(pred, gt, k as u8, spacing))
        .collect::<Result<Vec<_>>>()?;
    let mean_dice = per_class_dice.iter().sum::<f64>() / per_class_dice.len().max(1) as f64;
    let defined: Vec<f64> = per_class_hd95.iter().flatten().copied().collect();
    let mean_hd95 =
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(MetricResult {
        per_class_dice,
        per_class_hd95,
        mean_dice,
        mean_hd95,
    })
}
