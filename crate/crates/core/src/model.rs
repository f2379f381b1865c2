//! Per-modality encoders, point-wise projections, mean fusion and one shared
//! decoder.
//!
//! Every modality owns a [`ConvEncoder`] and one [`Pointwise`] projection per
//! feature level. Projected features of any non-empty subset are averaged
//! level by level and handed to the single [`Decoder`], so the same decoder
//! parameters serve every input combination.

use ndarray::{Array3, Array4, Zip};
use rand::Rng;

use crate::data::MultiModalSample;
use crate::error::{MagError, Result};
use crate::nn::{
    concat_channels, join, relu_backward, relu_inplace, split_channels, Conv3d, Conv3dCache, Param,
    Parameterized, Pointwise, Real, UpConv,
};
use crate::rng::stream;
use crate::types::{BackboneConfig, ExperimentConfig, ModalitySet, ModalitySubset, ModalityVolume};

const RELU_GAIN: f64 = 6.0;
const LINEAR_GAIN: f64 = 3.0;

/// Multi-resolution features of one modality (or a fusion of several).
/// `levels[0]` is full resolution; the last level is the bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<F> {
    levels: Vec<Array4<F>>,
    /// Modality index the bundle was encoded from; `None` once fused.
    source: Option<usize>,
}

impl<F: Real> FeatureBundle<F> {
    pub fn new(levels: Vec<Array4<F>>, source: Option<usize>) -> Self {
        Self { levels, source }
    }

    pub fn levels(&self) -> &[Array4<F>] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Array4<F>] {
        &mut self.levels
    }

    pub fn into_levels(self) -> Vec<Array4<F>> {
        self.levels
    }

    pub fn bottleneck(&self) -> &Array4<F> {
        self.levels.last().expect("bundle has at least one level")
    }

    pub fn skips(&self) -> &[Array4<F>] {
        &self.levels[..self.levels.len() - 1]
    }

    pub fn source(&self) -> Option<usize> {
        self.source
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|l| l.shape().to_vec()).collect()
    }

    pub fn element_count(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| Array4::zeros(l.raw_dim()))
                .collect(),
            source: self.source,
        }
    }

    pub fn scaled(&self, factor: F) -> Self {
        Self {
            levels: self.levels.iter().map(|l| l * factor).collect(),
            source: self.source,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            *a += b;
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.levels.len() == other.levels.len()
            && self
                .levels
                .iter()
                .zip(&other.levels)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Element-wise mean of bundles.
///
/// Bundles are summed in ascending source-modality order (untagged bundles
/// last, in input order) and then divided by the count, so any permutation
/// of tagged inputs gives bit-identical output.
pub fn fuse<F: Real>(bundles: &[FeatureBundle<F>]) -> Result<FeatureBundle<F>> {
    let refs: Vec<&FeatureBundle<F>> = bundles.iter().collect();
    fuse_refs(&refs)
}

pub fn fuse_refs<F: Real>(bundles: &[&FeatureBundle<F>]) -> Result<FeatureBundle<F>> {
    let Some(first) = bundles.first() else {
        return Err(MagError::Precondition(
            "cannot fuse an empty list of bundles".into(),
        ));
    };
    if let Some(bad) = bundles.iter().find(|b| !b.same_shape(first)) {
        return Err(MagError::Dimension(format!(
            "fusion needs identical shapes, got {:?} and {:?}",
            first.shapes(),
            bad.shapes()
        )));
    }
    if bundles.len() == 1 {
        return Ok((*first).clone());
    }
    let mut ordered = bundles.to_vec();
    ordered.sort_by_key(|b| b.source.unwrap_or(usize::MAX));
    let mut acc = FeatureBundle {
        levels: ordered[0].levels.clone(),
        source: None,
    };
    for b in &ordered[1..] {
        acc.add_assign(b);
    }
    let n = F::from_usize(ordered.len()).expect("small count");
    for l in &mut acc.levels {
        l.mapv_inplace(|v| v / n);
    }
    Ok(acc)
}

/// The encoder side of a backbone: maps an input volume to one feature map per
/// resolution level.
pub trait Encoder<F: Real>: Parameterized<F> + Send + Sync {
    type Trace: Send;

    fn in_channels(&self) -> usize;
    fn level_widths(&self) -> Vec<usize>;
    fn encode_levels(&self, x: &Array4<F>) -> Result<(Vec<Array4<F>>, Self::Trace)>;
    /// Accumulates parameter gradients given gradients of every level output.
    fn backward(&mut self, trace: &Self::Trace, d_levels: Vec<Array4<F>>);
}

/// Tiny convolutional encoder: a stride-1 stem followed by stride-2 stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder<F> {
    in_channels: usize,
    convs: Vec<Conv3d<F>>,
}

#[derive(Debug)]
pub struct ConvEncoderTrace<F> {
    caches: Vec<Conv3dCache<F>>,
    outputs: Vec<Array4<F>>,
}

impl<F: Real> ConvEncoder<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        backbone: &BackboneConfig,
        rng: &mut R,
    ) -> Self {
        let w = &backbone.widths;
        let mut convs = vec![Conv3d::new(in_channels, w[0], 1, RELU_GAIN, rng)];
        for k in 1..w.len() {
            convs.push(Conv3d::new(w[k - 1], w[k], 2, RELU_GAIN, rng));
        }
        Self { in_channels, convs }
    }
}

impl<F: Real> Encoder<F> for ConvEncoder<F> {
    type Trace = ConvEncoderTrace<F>;

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn level_widths(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.out_channels).collect()
    }

    fn encode_levels(&self, x: &Array4<F>) -> Result<(Vec<Array4<F>>, Self::Trace)> {
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut outputs: Vec<Array4<F>> = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let input = outputs.last().unwrap_or(x);
            let (mut y, cache) = conv.forward(input)?;
            relu_inplace(&mut y);
            caches.push(cache);
            outputs.push(y);
        }
        Ok((outputs.clone(), ConvEncoderTrace { caches, outputs }))
    }

    fn backward(&mut self, trace: &Self::Trace, d_levels: Vec<Array4<F>>) {
        let mut pending: Vec<Array4<F>> = d_levels;
        let mut carry: Option<Array4<F>> = None;
        for k in (0..self.convs.len()).rev() {
            let mut g = pending.pop().expect("one gradient per level");
            if let Some(c) = carry.take() {
                g += &c;
            }
            relu_backward(&trace.outputs[k], &mut g);
            carry = self.convs[k].backward(&trace.caches[k], &g, k > 0);
        }
    }
}

impl<F: Real> Parameterized<F> for ConvEncoder<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        for (k, c) in self.convs.iter().enumerate() {
            c.visit_params(&join(prefix, &format!("conv{k}")), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (k, c) in self.convs.iter_mut().enumerate() {
            c.visit_params_mut(&join(prefix, &format!("conv{k}")), f);
        }
    }
}

/// One projection per feature level.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<F> {
    layers: Vec<Pointwise<F>>,
}

impl<F: Real> Projection<F> {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        Self {
            layers: widths
                .iter()
                .map(|&w| Pointwise::new(w, w, LINEAR_GAIN, rng))
                .collect(),
        }
    }

    pub fn forward(&self, raw: &[Array4<F>], source: Option<usize>) -> Result<FeatureBundle<F>> {
        let levels = self
            .layers
            .iter()
            .zip(raw)
            .map(|(p, x)| p.forward(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureBundle::new(levels, source))
    }

    pub fn backward(&mut self, raw: &[Array4<F>], d_bundle: &FeatureBundle<F>) -> Vec<Array4<F>> {
        self.layers
            .iter_mut()
            .zip(raw)
            .zip(d_bundle.levels())
            .map(|((p, x), g)| p.backward(x, g))
            .collect()
    }
}

impl<F: Real> Parameterized<F> for Projection<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        for (k, l) in self.layers.iter().enumerate() {
            l.visit_params(&join(prefix, &format!("level{k}")), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join(prefix, &format!("level{k}")), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Merge<F> {
    Conv(Conv3d<F>),
    Point(Pointwise<F>),
}

/// Shared decoder: transposed-conv upsampling, skip concatenation and a merge
/// layer per level, then a point-wise classification head. The merge at full
/// resolution is point-wise to keep CPU cost low.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<F> {
    widths: Vec<usize>,
    num_classes: usize,
    /// `ups[j]` lifts level `j + 1` to level `j`.
    ups: Vec<UpConv<F>>,
    merges: Vec<Merge<F>>,
    head: Pointwise<F>,
}

#[derive(Debug)]
struct DecoderStage<F> {
    up_input: Array4<F>,
    concat: Array4<F>,
    conv_cache: Option<Conv3dCache<F>>,
    output: Array4<F>,
}

#[derive(Debug)]
pub struct DecoderTrace<F> {
    /// Indexed by target level `j`.
    stages: Vec<Option<DecoderStage<F>>>,
}

impl<F: Real> Decoder<F> {
    pub fn new<R: Rng + ?Sized>(
        backbone: &BackboneConfig,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let w = &backbone.widths;
        let depth = backbone.depth();
        let ups = (0..depth)
            .map(|j| UpConv::new(w[j + 1], w[j], LINEAR_GAIN, rng))
            .collect();
        let merges = (0..depth)
            .map(|j| {
                if j == 0 {
                    Merge::Point(Pointwise::new(2 * w[j], w[j], RELU_GAIN, rng))
                } else {
                    Merge::Conv(Conv3d::new(2 * w[j], w[j], 1, RELU_GAIN, rng))
                }
            })
            .collect();
        let head = Pointwise::new(w[0], num_classes, LINEAR_GAIN, rng);
        Self {
            widths: w.clone(),
            num_classes,
            ups,
            merges,
            head,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check(&self, bundle: &FeatureBundle<F>) -> Result<()> {
        if bundle.levels.len() != self.widths.len() {
            return Err(MagError::Dimension(format!(
                "decoder expects {} feature levels, got {}",
                self.widths.len(),
                bundle.levels.len()
            )));
        }
        for (j, (l, &w)) in bundle.levels.iter().zip(&self.widths).enumerate() {
            if l.shape()[0] != w {
                return Err(MagError::Dimension(format!(
                    "level {j} has {} channels, decoder expects {w}",
                    l.shape()[0]
                )));
            }
            if j > 0 {
                let fine = &bundle.levels[j - 1].shape()[1..];
                let coarse = &l.shape()[1..];
                if fine.iter().zip(coarse).any(|(&f, &c)| f != 2 * c) {
                    return Err(MagError::Dimension(format!(
                        "level {j} extent {coarse:?} is not half of level {} extent {fine:?}",
                        j - 1
                    )));
                }
            }
        }
        Ok(())
    }

    fn run(&self, bundle: &FeatureBundle<F>, keep: bool) -> Result<(Array4<F>, DecoderTrace<F>)> {
        self.check(bundle)?;
        let depth = self.widths.len() - 1;
        let mut stages: Vec<Option<DecoderStage<F>>> = (0..depth).map(|_| None).collect();
        let mut h = bundle.levels[depth].clone();
        for j in (0..depth).rev() {
            let up = self.ups[j].forward(&h)?;
            let concat = concat_channels(&up, &bundle.levels[j])?;
            let (mut out, conv_cache) = match &self.merges[j] {
                Merge::Conv(c) => {
                    let (y, cache) = c.forward(&concat)?;
                    (y, Some(cache))
                }
                Merge::Point(p) => (p.forward(&concat)?, None),
            };
            relu_inplace(&mut out);
            let next = out.clone();
            if keep {
                stages[j] = Some(DecoderStage {
                    up_input: h,
                    concat,
                    conv_cache,
                    output: out,
                });
            }
            h = next;
        }
        let logits = self.head.forward(&h)?;
        Ok((logits, DecoderTrace { stages }))
    }

    pub fn forward(&self, bundle: &FeatureBundle<F>) -> Result<Array4<F>> {
        Ok(self.run(bundle, false)?.0)
    }

    pub fn forward_traced(
        &self,
        bundle: &FeatureBundle<F>,
    ) -> Result<(Array4<F>, DecoderTrace<F>)> {
        self.run(bundle, true)
    }

    /// Accumulates decoder gradients and returns the gradient of the input
    /// bundle.
    pub fn backward(&mut self, trace: &DecoderTrace<F>, d_logits: &Array4<F>) -> FeatureBundle<F> {
        let depth = self.widths.len() - 1;
        let head_input = &trace.stages[0].as_ref().expect("traced forward").output;
        let mut dh = self.head.backward(head_input, d_logits);
        let mut d_levels: Vec<Option<Array4<F>>> = (0..=depth).map(|_| None).collect();
        for j in 0..depth {
            let stage = trace.stages[j].as_ref().expect("traced forward");
            relu_backward(&stage.output, &mut dh);
            let d_concat = match &mut self.merges[j] {
                Merge::Conv(c) => c
                    .backward(stage.conv_cache.as_ref().expect("conv cache"), &dh, true)
                    .expect("input gradient requested"),
                Merge::Point(p) => p.backward(&stage.concat, &dh),
            };
            let (d_up, d_skip) = split_channels(&d_concat, self.widths[j]);
            d_levels[j] = Some(d_skip);
            dh = self.ups[j].backward(&stage.up_input, &d_up);
        }
        d_levels[depth] = Some(dh);
        FeatureBundle::new(
            d_levels.into_iter().map(|l| l.expect("filled")).collect(),
            None,
        )
    }
}

impl<F: Real> Parameterized<F> for Decoder<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        for (j, u) in self.ups.iter().enumerate() {
            u.visit_params(&join(prefix, &format!("up{j}")), f);
        }
        for (j, m) in self.merges.iter().enumerate() {
            let p = join(prefix, &format!("merge{j}"));
            match m {
                Merge::Conv(c) => c.visit_params(&p, f),
                Merge::Point(c) => c.visit_params(&p, f),
            }
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (j, u) in self.ups.iter_mut().enumerate() {
            u.visit_params_mut(&join(prefix, &format!("up{j}")), f);
        }
        for (j, m) in self.merges.iter_mut().enumerate() {
            let p = join(prefix, &format!("merge{j}"));
            match m {
                Merge::Conv(c) => c.visit_params_mut(&p, f),
                Merge::Point(c) => c.visit_params_mut(&p, f),
            }
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

/// Converts volumes to a `[channels, D, H, W]` network input, checking that
/// every extent is divisible by `2^depth`.
pub fn volumes_to_input<F: Real>(volumes: &[&Array3<f32>], depth: usize) -> Result<Array4<F>> {
    let first = volumes
        .first()
        .ok_or_else(|| MagError::Precondition("no input volumes".into()))?;
    let sh = first.shape().to_vec();
    let unit = 1usize << depth;
    if sh.iter().any(|&n| n == 0 || n % unit != 0) {
        return Err(MagError::Dimension(format!(
            "volume extent {sh:?} must be a positive multiple of {unit}"
        )));
    }
    if let Some(v) = volumes.iter().find(|v| v.shape() != sh.as_slice()) {
        return Err(MagError::Dimension(format!(
            "input volumes disagree in shape: {sh:?} vs {:?}",
            v.shape()
        )));
    }
    let mut x = Array4::<F>::zeros((volumes.len(), sh[0], sh[1], sh[2]));
    for (mut dst, src) in x.outer_iter_mut().zip(volumes) {
        Zip::from(&mut dst)
            .and(*src)
            .for_each(|d, &s| *d = F::from_f32(s).expect("finite"));
    }
    Ok(x)
}

/// Everything the MAG loss needs from one sample: per-modality and fused
/// outputs and their (projected) features.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardAll<F> {
    pub modality_logits: Vec<Array4<F>>,
    pub fused_logits: Array4<F>,
    pub modality_bundles: Vec<FeatureBundle<F>>,
    pub fused_bundle: FeatureBundle<F>,
}

#[derive(Debug)]
pub struct EncodeTrace<F> {
    modality: usize,
    encoder: ConvEncoderTrace<F>,
    raw: Vec<Array4<F>>,
}

/// Activations retained by [`MagModel::forward_all_traced`].
#[derive(Debug)]
pub struct ForwardAllTrace<F> {
    encodes: Vec<EncodeTrace<F>>,
    modality_decodes: Vec<DecoderTrace<F>>,
    fused_decode: DecoderTrace<F>,
}

/// Activations retained by [`MagModel::forward_subset_traced`].
#[derive(Debug)]
pub struct SubsetTrace<F> {
    encodes: Vec<EncodeTrace<F>>,
    decode: DecoderTrace<F>,
}

/// Upstream gradients of [`ForwardAll`] outputs. Entries left `None` are
/// treated as zero.
#[derive(Debug, Clone)]
pub struct ForwardAllGrads<F> {
    pub modality_logits: Vec<Option<Array4<F>>>,
    pub fused_logits: Option<Array4<F>>,
    /// Direct gradients on the projected per-modality features.
    pub modality_bundles: Vec<Option<FeatureBundle<F>>>,
}

impl<F> ForwardAllGrads<F> {
    pub fn empty(m: usize) -> Self {
        Self {
            modality_logits: (0..m).map(|_| None).collect(),
            fused_logits: None,
            modality_bundles: (0..m).map(|_| None).collect(),
        }
    }
}

/// The modality-agnostic segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct MagModel<F> {
    modalities: ModalitySet,
    backbone: BackboneConfig,
    encoders: Vec<ConvEncoder<F>>,
    projections: Vec<Projection<F>>,
    decoder: Decoder<F>,
}

impl<F: Real> MagModel<F> {
    /// Seeded initialisation from a validated configuration.
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let modalities = config.modality_set()?;
        let mut rng = stream(seed, "init", 0);
        let encoders = (0..modalities.len())
            .map(|_| ConvEncoder::new(1, &config.backbone, &mut rng))
            .collect();
        let projections = (0..modalities.len())
            .map(|_| Projection::new(&config.backbone.widths, &mut rng))
            .collect();
        let decoder = Decoder::new(&config.backbone, config.num_classes, &mut rng);
        Ok(Self {
            modalities,
            backbone: config.backbone.clone(),
            encoders,
            projections,
            decoder,
        })
    }

    pub fn modalities(&self) -> &ModalitySet {
        &self.modalities
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes
    }

    pub fn decoder(&self) -> &Decoder<F> {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Decoder<F> {
        &mut self.decoder
    }

    fn modality_index(&self, volume: &ModalityVolume) -> Result<usize> {
        match self.modalities.get(volume.modality.index) {
            Some(id) if id.name == volume.modality.name => Ok(id.index),
            _ => Err(MagError::Lookup {
                kind: "modality",
                name: volume.modality.name.clone(),
            }),
        }
    }

    fn encode_index(
        &self,
        index: usize,
        volume: &ModalityVolume,
    ) -> Result<(FeatureBundle<F>, EncodeTrace<F>)> {
        let x = volumes_to_input::<F>(&[&volume.voxels], self.backbone.depth())?;
        let (raw, encoder) = self.encoders[index].encode_levels(&x)?;
        let bundle = self.projections[index].forward(&raw, Some(index))?;
        Ok((
            bundle,
            EncodeTrace {
                modality: index,
                encoder,
                raw,
            },
        ))
    }

    /// Projected feature bundle of one modality volume.
    pub fn encode(&self, volume: &ModalityVolume) -> Result<FeatureBundle<F>> {
        let index = self.modality_index(volume)?;
        Ok(self.encode_index(index, volume)?.0)
    }

    /// Per-voxel class logits at full input resolution.
    pub fn decode(&self, bundle: &FeatureBundle<F>) -> Result<Array4<F>> {
        self.decoder.forward(bundle)
    }

    fn check_sample(&self, sample: &MultiModalSample) -> Result<()> {
        for id in self.modalities.ids() {
            let v = sample.volume(id.index)?;
            if v.modality.name != id.name {
                return Err(MagError::Data(format!(
                    "subject {} has modality {} where {} was expected",
                    sample.subject_id, v.modality.name, id.name
                )));
            }
        }
        Ok(())
    }

    /// `decode(fuse(encode(x_i) for i in subset))`.
    pub fn forward_subset(
        &self,
        sample: &MultiModalSample,
        subset: &ModalitySubset,
    ) -> Result<Array4<F>> {
        let bundles = subset
            .iter()
            .map(|i| self.encode(sample.volume(i)?))
            .collect::<Result<Vec<_>>>()?;
        if bundles.is_empty() {
            return Err(MagError::Precondition("subset must be non-empty".into()));
        }
        self.decode(&fuse(&bundles)?)
    }

    pub fn forward_subset_traced(
        &self,
        sample: &MultiModalSample,
        subset: &ModalitySubset,
    ) -> Result<(Array4<F>, SubsetTrace<F>)> {
        let mut bundles = Vec::with_capacity(subset.len());
        let mut encodes = Vec::with_capacity(subset.len());
        for i in subset.iter() {
            let volume = sample.volume(i)?;
            self.modality_index(volume)?;
            let (b, t) = self.encode_index(i, volume)?;
            bundles.push(b);
            encodes.push(t);
        }
        let (logits, decode) = self.decoder.forward_traced(&fuse(&bundles)?)?;
        Ok((logits, SubsetTrace { encodes, decode }))
    }

    /// Backpropagates a logits gradient through a subset forward pass.
    pub fn backward_subset(&mut self, trace: &SubsetTrace<F>, d_logits: &Array4<F>) {
        let d_fused = self.decoder.backward(&trace.decode, d_logits);
        let share = F::one() / F::from_usize(trace.encodes.len()).expect("small count");
        let d_each = d_fused.scaled(share);
        for enc in &trace.encodes {
            self.backward_encode(enc, &d_each);
        }
    }

    fn backward_encode(&mut self, trace: &EncodeTrace<F>, d_bundle: &FeatureBundle<F>) {
        let i = trace.modality;
        let d_raw = self.projections[i].backward(&trace.raw, d_bundle);
        self.encoders[i].backward(&trace.encoder, d_raw);
    }

    /// One decoder pass per modality plus one fused pass over every modality.
    pub fn forward_all(&self, sample: &MultiModalSample) -> Result<ForwardAll<F>> {
        Ok(self.forward_all_impl(sample, false)?.0)
    }

    pub fn forward_all_traced(
        &self,
        sample: &MultiModalSample,
    ) -> Result<(ForwardAll<F>, ForwardAllTrace<F>)> {
        self.forward_all_impl(sample, true)
    }

    fn forward_all_impl(
        &self,
        sample: &MultiModalSample,
        keep: bool,
    ) -> Result<(ForwardAll<F>, ForwardAllTrace<F>)> {
        self.check_sample(sample)?;
        let m = self.modalities.len();
        let mut modality_logits = Vec::with_capacity(m);
        let mut modality_bundles = Vec::with_capacity(m);
        let mut encodes = Vec::with_capacity(m);
        let mut modality_decodes = Vec::with_capacity(m);
        for i in 0..m {
            let (bundle, enc) = self.encode_index(i, sample.volume(i)?)?;
            let (logits, dec) = self.decoder.run(&bundle, keep)?;
            modality_logits.push(logits);
            modality_bundles.push(bundle);
            if keep {
                encodes.push(enc);
                modality_decodes.push(dec);
            }
        }
        let fused_bundle = fuse(&modality_bundles)?;
        let (fused_logits, fused_decode) = self.decoder.run(&fused_bundle, keep)?;
        Ok((
            ForwardAll {
                modality_logits,
                fused_logits,
                modality_bundles,
                fused_bundle,
            },
            ForwardAllTrace {
                encodes,
                modality_decodes,
                fused_decode,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream gradients of
    /// [`ForwardAll`] outputs.
    pub fn backward_all(&mut self, trace: &ForwardAllTrace<F>, grads: &ForwardAllGrads<F>) {
        let m = trace.encodes.len();
        let mut d_bundles: Vec<FeatureBundle<F>> = trace
            .encodes
            .iter()
            .zip(&grads.modality_bundles)
            .map(|(enc, g)| match g {
                Some(g) => g.clone(),
                None => {
                    let levels = enc.raw.iter().map(|l| Array4::zeros(l.raw_dim())).collect();
                    FeatureBundle::new(levels, Some(enc.modality))
                }
            })
            .collect();
        if let Some(d) = &grads.fused_logits {
            let d_fused = self.decoder.backward(&trace.fused_decode, d);
            let share = d_fused.scaled(F::one() / F::from_usize(m).expect("small count"));
            for d_b in &mut d_bundles {
                d_b.add_assign(&share);
            }
        }
        for (i, g) in grads.modality_logits.iter().enumerate() {
            if let Some(d) = g {
                let d_b = self.decoder.backward(&trace.modality_decodes[i], d);
                d_bundles[i].add_assign(&d_b);
            }
        }
        for (enc, d_b) in trace.encodes.iter().zip(&d_bundles) {
            self.backward_encode(enc, d_b);
        }
    }
}

impl<F: Real> Parameterized<F> for MagModel<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        for (i, e) in self.encoders.iter().enumerate() {
            e.visit_params(&join(prefix, &format!("encoder{i}")), f);
        }
        for (i, p) in self.projections.iter().enumerate() {
            p.visit_params(&join(prefix, &format!("projection{i}")), f);
        }
        self.decoder.visit_params(&join(prefix, "decoder"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit_params_mut(&join(prefix, &format!("encoder{i}")), f);
        }
        for (i, p) in self.projections.iter_mut().enumerate() {
            p.visit_params_mut(&join(prefix, &format!("projection{i}")), f);
        }
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
    }
}

/// Names and element counts of every parameter, in visiting order.
pub fn param_inventory<F: Real, P: Parameterized<F> + ?Sized>(model: &P) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |name, p| out.push((name, p.len())));
    out
}

/// Order-sensitive digest of every parameter bit pattern.
pub fn param_digest<P: Parameterized<f32> + ?Sized>(model: &P) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    model.visit_params("", &mut |name, p| {
        for b in name.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
        }
        for v in p.value.iter() {
            h = (h ^ u64::from(v.to_bits())).wrapping_mul(0x100_0000_01b3);
        }
    });
    h
}
