//! Independent reference implementations and random instance generators
//! shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use magms::model::FeatureBundle;
use magms::types::LabelMap;
use ndarray::{Array3, Array4};
use rand::Rng;

pub fn random_logits<R: Rng>(rng: &mut R, c: usize, shape: [usize; 3], scale: f64) -> Array4<f64> {
    Array4::from_shape_fn((c, shape[0], shape[1], shape[2]), |_| {
        rng.random_range(-scale..scale)
    })
}

pub fn random_labels<R: Rng>(rng: &mut R, c: usize, shape: [usize; 3]) -> LabelMap {
    LabelMap::new(
        Array3::from_shape_fn(shape, |_| rng.random_range(0..c as u8)),
        c,
    )
    .unwrap()
}

pub fn random_shape<R: Rng>(rng: &mut R, max: usize) -> [usize; 3] {
    [
        rng.random_range(1..=max),
        rng.random_range(1..=max),
        rng.random_range(1..=max),
    ]
}

pub fn random_bundle<R: Rng>(rng: &mut R, shapes: &[[usize; 4]]) -> FeatureBundle<f64> {
    let levels = shapes
        .iter()
        .map(|s| Array4::from_shape_fn((s[0], s[1], s[2], s[3]), |_| rng.random_range(-1.0..1.0)))
        .collect();
    FeatureBundle::new(levels, None)
}

/// Softmax probabilities of voxel `(z, y, x)` at temperature `t`.
pub fn softmax_at(logits: &Array4<f64>, z: usize, y: usize, x: usize, t: f64) -> Vec<f64> {
    let c = logits.shape()[0];
    let zs: Vec<f64> = (0..c).map(|k| logits[[k, z, y, x]] / t).collect();
    let max = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = zs.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn voxels(shape: &[usize]) -> impl Iterator<Item = (usize, usize, usize)> {
    let (d, h, w) = (shape[1], shape[2], shape[3]);
    (0..d).flat_map(move |z| (0..h).flat_map(move |y| (0..w).map(move |x| (z, y, x))))
}

/// `1 - mean_k (2 I_k + eps) / (P_k + G_k + eps)` plus mean cross-entropy.
pub fn dice_ce_oracle(labels: &LabelMap, logits: &Array4<f64>, eps: f64) -> f64 {
    let c = logits.shape()[0];
    let mut inter = vec![0.0; c];
    let mut p_sum = vec![0.0; c];
    let mut g_sum = vec![0.0; c];
    let mut ce = 0.0;
    let mut n = 0.0;
    for (z, y, x) in voxels(logits.shape()) {
        let p = softmax_at(logits, z, y, x, 1.0);
        let t = labels.classes()[[z, y, x]] as usize;
        for k in 0..c {
            let g = if k == t { 1.0 } else { 0.0 };
            inter[k] += p[k] * g;
            p_sum[k] += p[k];
            g_sum[k] += g;
        }
        ce += -p[t].ln();
        n += 1.0;
    }
    let dice: f64 = (0..c)
        .map(|k| (2.0 * inter[k] + eps) / (p_sum[k] + g_sum[k] + eps))
        .sum::<f64>()
        / c as f64;
    (1.0 - dice) + ce / n
}

/// Voxel-mean `sum_k p_t log(p_t / p_s)` at temperature `t`.
pub fn kl_oracle(teacher: &Array4<f64>, student: &Array4<f64>, t: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for (z, y, x) in voxels(teacher.shape()) {
        let pt = softmax_at(teacher, z, y, x, t);
        let ps = softmax_at(student, z, y, x, t);
        total += pt
            .iter()
            .zip(&ps)
            .map(|(a, b)| a * (a / b).ln())
            .sum::<f64>();
        n += 1.0;
    }
    total / n
}

pub fn l2_oracle(a: &FeatureBundle<f64>, b: &FeatureBundle<f64>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0.0;
    for (x, y) in a.levels().iter().zip(b.levels()) {
        for (p, q) in x.iter().zip(y.iter()) {
            sum += (p - q) * (p - q);
            count += 1.0;
        }
    }
    sum / count
}

/// Central differences of `f` at every coordinate of `x`.
pub fn numeric_gradient<A>(
    x: &ndarray::Array<f64, A>,
    h: f64,
    mut f: impl FnMut(&ndarray::Array<f64, A>) -> f64,
) -> Vec<f64>
where
    A: ndarray::Dimension,
{
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + h;
        let plus = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - h;
        let minus = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// `|a - b| / max(|a|, |b|, tiny)` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Dice for class `c` from explicit voxel sets.
pub fn dice_oracle(pred: &LabelMap, gt: &LabelMap, c: u8) -> f64 {
    let set = |m: &LabelMap| -> HashSet<(usize, usize, usize)> {
        m.classes()
            .indexed_iter()
            .filter(|(_, &v)| v == c)
            .map(|(i, _)| i)
            .collect()
    };
    let (p, g) = (set(pred), set(gt));
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
}

fn boundary_oracle(m: &LabelMap, c: u8) -> Vec<[usize; 3]> {
    let a = m.classes();
    let sh = a.shape();
    let mut out = Vec::new();
    for ((z, y, x), &v) in a.indexed_iter() {
        if v != c {
            continue;
        }
        let p = [z as isize, y as isize, x as isize];
        let mut edge = false;
        for axis in 0..3 {
            for d in [-1isize, 1] {
                let mut q = p;
                q[axis] += d;
                let inside = (0..3).all(|k| q[k] >= 0 && (q[k] as usize) < sh[k]);
                if !inside || a[[q[0] as usize, q[1] as usize, q[2] as usize]] != c {
                    edge = true;
                }
            }
        }
        if edge {
            out.push([z, y, x]);
        }
    }
    out
}

/// All-pairs HD95 with linear interpolation at rank `0.95 (n - 1)`.
pub fn hd95_oracle(pred: &LabelMap, gt: &LabelMap, c: u8, spacing: [f64; 3]) -> Option<f64> {
    let a = boundary_oracle(pred, c);
    let b = boundary_oracle(gt, c);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| {
        set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)
    };
    let mut all: Vec<f64> = a
        .iter()
        .map(|p| nearest(p, &b))
        .chain(b.iter().map(|p| nearest(p, &a)))
        .collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (all.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(all[lo] + (all[hi] - all[lo]) * (rank - lo as f64))
}

/// Random label map whose class regions are blobs (a few random boxes)
/// rather than salt-and-pepper noise.
pub fn random_blob_map<R: Rng>(rng: &mut R, shape: [usize; 3], classes: usize) -> LabelMap {
    let mut a = Array3::<u8>::zeros(shape);
    for _ in 0..rng.random_range(1..5) {
        let c = rng.random_range(1..classes as u8);
        let lo: Vec<usize> = (0..3).map(|k| rng.random_range(0..shape[k])).collect();
        let hi: Vec<usize> = (0..3)
            .map(|k| rng.random_range(lo[k]..shape[k]) + 1)
            .collect();
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    a[[z, y, x]] = c;
                }
            }
        }
    }
    LabelMap::new(a, classes).unwrap()
}
