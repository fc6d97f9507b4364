//! Shared data model and dense-mask algebra.
//!
//! Everything downstream (losses, metrics, the trainer) speaks in the types
//! defined here: per-pixel panoptic labelings, per-segment logit channels,
//! soft masks, feature maps, and unit-norm segment embeddings, plus the
//! pooling / normalization / dice / IoU primitives that operate on them.

use ndarray::{Array1, Array2, Array3, ArrayView, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// One tracked segment: a thing instance or a stuff region.
///
/// Stuff regions are tracked by class, so a stuff entry's `track_id` always
/// equals its `class_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub track_id: u32,
    pub class_id: u32,
    pub is_thing: bool,
}

/// Ordered list of all segments of a video; the order fixes the logit
/// channel layout used everywhere else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRegistry {
    entries: Vec<RegistryEntry>,
}

impl SegmentRegistry {
    pub fn new(entries: Vec<RegistryEntry>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.track_id) {
                return Err(CoreError::Inconsistency(format!(
                    "duplicate track id {} in registry",
                    e.track_id
                )));
            }
            if !e.is_thing && e.track_id != e.class_id {
                return Err(CoreError::Inconsistency(format!(
                    "stuff entry track id {} differs from class id {}",
                    e.track_id, e.class_id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Logit channel of a track id, if registered.
    pub fn channel_of(&self, track_id: u32) -> Option<usize> {
        self.entries.iter().position(|e| e.track_id == track_id)
    }

    pub fn entry_of(&self, track_id: u32) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.track_id == track_id)
    }
}

/// Per-pixel (semantic class, track id) labeling of one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticMap {
    semantic: Array2<u32>,
    instance: Array2<u32>,
}

impl PanopticMap {
    /// Builds a map, checking that both grids share a shape and that every
    /// track id carries exactly one class id within the frame.
    pub fn new(semantic: Array2<u32>, instance: Array2<u32>) -> Result<Self> {
        if semantic.dim() != instance.dim() {
            return Err(CoreError::Argument(format!(
                "semantic grid {:?} and instance grid {:?} differ in shape",
                semantic.dim(),
                instance.dim()
            )));
        }
        let mut class_of = std::collections::BTreeMap::new();
        for (sem, inst) in semantic.iter().zip(instance.iter()) {
            match class_of.insert(*inst, *sem) {
                Some(prev) if prev != *sem => {
                    return Err(CoreError::Inconsistency(format!(
                        "track id {inst} labeled with classes {prev} and {sem} in one frame"
                    )));
                }
                _ => {}
            }
        }
        Ok(Self { semantic, instance })
    }

    pub fn semantic(&self) -> &Array2<u32> {
        &self.semantic
    }

    pub fn instance(&self) -> &Array2<u32> {
        &self.instance
    }

    pub fn height(&self) -> usize {
        self.semantic.nrows()
    }

    pub fn width(&self) -> usize {
        self.semantic.ncols()
    }

    /// Track ids present in this frame, ascending.
    pub fn present_tracks(&self) -> Vec<u32> {
        let set: std::collections::BTreeSet<u32> = self.instance.iter().copied().collect();
        set.into_iter().collect()
    }
}

/// RGB frame, `(H, W, 3)`, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(CoreError::Argument(format!(
                "image must have 3 channels, got {}",
                data.dim().2
            )));
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }
}

/// Per-pixel displacement `(dx, dy)` mapping frame-t coordinates into a
/// later (or earlier) frame; stored `(H, W, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub data: Array3<f64>,
}

impl FlowField {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 2 {
            return Err(CoreError::Argument(format!(
                "flow must have 2 components, got {}",
                data.dim().2
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("flow field".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, 2)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// `(dx, dy)` at pixel `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.data[(y, x, 0)], self.data[(y, x, 1)])
    }
}

/// Per-frame segment logits, one channel per registry entry, `(N, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVolume {
    pub data: Array3<f64>,
    pub frame_index: usize,
}

impl LogitVolume {
    pub fn new(data: Array3<f64>, frame_index: usize) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("logit volume".into()));
        }
        Ok(Self { data, frame_index })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Channel-softmaxed logits; per-pixel channel sums are 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMaskVolume {
    pub data: Array3<f64>,
}

impl SoftMaskVolume {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }
}

/// Per-pixel feature vectors, `(D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("feature map".into()));
        }
        Ok(Self { data })
    }

    pub fn dim(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Unit-norm embedding of one segment in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEmbedding {
    pub vector: Array1<f64>,
    pub track_id: u32,
    pub frame_index: usize,
}

impl SegmentEmbedding {
    pub fn new(vector: Array1<f64>, track_id: u32, frame_index: usize) -> Result<Self> {
        let norm = vector.dot(&vector).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(CoreError::Argument(format!(
                "segment embedding for track {track_id} has norm {norm}, expected 1"
            )));
        }
        Ok(Self {
            vector,
            track_id,
            frame_index,
        })
    }
}

/// Channel softmax with per-pixel max subtraction.
pub fn softmax_channels(logits: &LogitVolume) -> Result<SoftMaskVolume> {
    if !logits.data.iter().all(|v| v.is_finite()) {
        return Err(CoreError::NonFinite("softmax input".into()));
    }
    let (n, h, w) = logits.data.dim();
    if n == 0 {
        return Err(CoreError::Argument("softmax over zero channels".into()));
    }
    let mut out = Array3::<f64>::zeros((n, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut max = f64::NEG_INFINITY;
            for c in 0..n {
                max = max.max(logits.data[(c, y, x)]);
            }
            let mut sum = 0.0;
            for c in 0..n {
                let e = (logits.data[(c, y, x)] - max).exp();
                out[(c, y, x)] = e;
                sum += e;
            }
            for c in 0..n {
                out[(c, y, x)] /= sum;
            }
        }
    }
    Ok(SoftMaskVolume { data: out })
}

/// Mean feature vector over the set pixels of `mask`.
pub fn mask_pool(features: &FeatureMap, mask: &Array2<bool>) -> Result<Array1<f64>> {
    let (d, h, w) = features.data.dim();
    if mask.dim() != (h, w) {
        return Err(CoreError::Argument(format!(
            "mask shape {:?} does not match feature map {:?}",
            mask.dim(),
            (h, w)
        )));
    }
    let mut sum = Array1::<f64>::zeros(d);
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] {
                count += 1;
                for c in 0..d {
                    sum[c] += features.data[(c, y, x)];
                }
            }
        }
    }
    if count == 0 {
        return Err(CoreError::EmptySegment(
            "mask_pool over an empty mask".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// `v / ||v||`, rejecting zero-norm inputs.
pub fn l2_normalize(v: &Array1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(v).sqrt();
    if norm == 0.0 {
        return Err(CoreError::DegenerateEmbedding);
    }
    Ok(v / norm)
}

/// Pulls a gradient w.r.t. the unit vector `v/||v||` back to `v`:
/// `g_v = (g_z - (g_z . z) z) / ||v||`.
pub fn l2_normalize_backprop(pre: &Array1<f64>, grad_unit: &Array1<f64>) -> Result<Array1<f64>> {
    let norm = pre.dot(pre).sqrt();
    if norm == 0.0 {
        return Err(CoreError::DegenerateEmbedding);
    }
    let unit = pre / norm;
    let radial = grad_unit.dot(&unit);
    Ok((grad_unit - &(radial * &unit)) / norm)
}

/// L2-normalizes every pixel's feature vector.
pub fn l2_normalize_pixels(features: &FeatureMap) -> Result<FeatureMap> {
    let (d, h, w) = features.data.dim();
    let mut out = features.data.clone();
    for y in 0..h {
        for x in 0..w {
            let mut sq = 0.0;
            for c in 0..d {
                sq += out[(c, y, x)] * out[(c, y, x)];
            }
            let norm = sq.sqrt();
            if norm == 0.0 {
                return Err(CoreError::DegenerateEmbedding);
            }
            for c in 0..d {
                out[(c, y, x)] /= norm;
            }
        }
    }
    Ok(FeatureMap { data: out })
}

/// Soft dice `2 sum(p*q) / (sum(p^2) + sum(q^2))`, defined for inputs in
/// `[0,1]` that are not both all-zero.
pub fn dice<D: Dimension>(p: ArrayView<f64, D>, q: ArrayView<f64, D>) -> Result<f64> {
    let (num, den) = dice_terms(&p, &q)?;
    Ok(num / den)
}

/// Dice together with its gradients w.r.t. both inputs.
pub fn dice_with_grad<D: Dimension>(
    p: ArrayView<f64, D>,
    q: ArrayView<f64, D>,
) -> Result<(f64, ndarray::Array<f64, D>, ndarray::Array<f64, D>)> {
    let (num, den) = dice_terms(&p, &q)?;
    let value = num / den;
    // d/dp [num/den] = (2q den - num 2p) / den^2
    let mut grad_p = ndarray::Array::<f64, D>::zeros(p.raw_dim());
    let mut grad_q = ndarray::Array::<f64, D>::zeros(q.raw_dim());
    ndarray::Zip::from(&mut grad_p)
        .and(&mut grad_q)
        .and(&p)
        .and(&q)
        .for_each(|gp, gq, &pe, &qe| {
            *gp = (2.0 * qe * den - num * 2.0 * pe) / (den * den);
            *gq = (2.0 * pe * den - num * 2.0 * qe) / (den * den);
        });
    Ok((value, grad_p, grad_q))
}

fn dice_terms<D: Dimension>(p: &ArrayView<f64, D>, q: &ArrayView<f64, D>) -> Result<(f64, f64)> {
    if p.raw_dim() != q.raw_dim() {
        return Err(CoreError::Argument(format!(
            "dice inputs differ in shape: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    debug_assert!(
        p.iter().chain(q.iter()).all(|&v| (0.0..=1.0).contains(&v)),
        "dice inputs must lie in [0,1]"
    );
    let mut cross = 0.0;
    let mut p_sq = 0.0;
    let mut q_sq = 0.0;
    for (&pe, &qe) in p.iter().zip(q.iter()) {
        cross += pe * qe;
        p_sq += pe * pe;
        q_sq += qe * qe;
    }
    if p_sq == 0.0 && q_sq == 0.0 {
        return Err(CoreError::UndefinedDice);
    }
    Ok((2.0 * cross, p_sq + q_sq))
}

/// What `binary_iou` returns when the union is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyUnion {
    Zero,
    Error,
}

/// `|a n b| / |a u b|` over boolean grids or tubes of equal shape.
pub fn binary_iou<D: Dimension>(
    a: ArrayView<bool, D>,
    b: ArrayView<bool, D>,
    empty_union: EmptyUnion,
) -> Result<f64> {
    if a.raw_dim() != b.raw_dim() {
        return Err(CoreError::Argument(format!(
            "iou inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&ae, &be) in a.iter().zip(b.iter()) {
        if ae && be {
            inter += 1;
        }
        if ae || be {
            union += 1;
        }
    }
    if union == 0 {
        return match empty_union {
            EmptyUnion::Zero => Ok(0.0),
            EmptyUnion::Error => Err(CoreError::Argument(
                "iou of two empty masks with no empty-union policy".into(),
            )),
        };
    }
    Ok(inter as f64 / union as f64)
}

/// One binary mask per registry entry present in the frame, in registry
/// order. Things are keyed by track id, stuff by class id (identical by the
/// registry invariant).
pub fn extract_masks(
    panoptic: &PanopticMap,
    registry: &SegmentRegistry,
) -> Result<Vec<(u32, Array2<bool>)>> {
    for inst in panoptic.present_tracks() {
        if registry.channel_of(inst).is_none() {
            return Err(CoreError::Inconsistency(format!(
                "instance id {inst} present in frame but absent from registry"
            )));
        }
    }
    let mut masks = Vec::new();
    for entry in registry.entries() {
        let mask = panoptic.instance().map(|&id| id == entry.track_id);
        if mask.iter().any(|&m| m) {
            masks.push((entry.track_id, mask));
        }
    }
    Ok(masks)
}

/// One-hot logits scaled by `scale`: channel `i` is `scale` on the pixels of
/// registry entry `i` and 0 elsewhere. Softmaxing them reproduces the
/// ground-truth masks to within `exp(-scale)`.
pub fn logits_from_panoptic(
    panoptic: &PanopticMap,
    registry: &SegmentRegistry,
    scale: f64,
    frame_index: usize,
) -> Result<LogitVolume> {
    let (h, w) = (panoptic.height(), panoptic.width());
    let mut data = Array3::<f64>::zeros((registry.len(), h, w));
    for y in 0..h {
        for x in 0..w {
            let track = panoptic.instance()[(y, x)];
            let channel = registry.channel_of(track).ok_or_else(|| {
                CoreError::Inconsistency(format!("instance id {track} absent from registry"))
            })?;
            data[(channel, y, x)] = scale;
        }
    }
    LogitVolume::new(data, frame_index)
}
