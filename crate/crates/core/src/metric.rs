//! Class prototypes, cosine distance and nearest-prototype decoding.
//!
//! Pixels are assigned soft class probabilities with a softmax over
//! `scale * cos(f(x_j), p_c)`. The argmax of that distribution is the nearest
//! prototype under cosine distance, so the probabilities double as the
//! confidence map consumed by soft-masked pooling.

use crate::features::{background_mask, masked_average_pool, weighted_sum, BinaryMask, FeatureMap, SoftMask};
use crate::{Error, Result};

/// Class id reserved for the background.
pub const BACKGROUND: usize = 0;

/// Default softmax scale applied to cosine similarities.
pub const DEFAULT_SCALE: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Vec<f64>,
}

/// Background prototype first, then foreground prototypes by ascending class id.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    prototypes: Vec<Prototype>,
}

impl PrototypeSet {
    pub fn new(background: Vec<f64>, mut foreground: Vec<(usize, Vec<f64>)>) -> Result<Self> {
        foreground.sort_by_key(|(id, _)| *id);
        if foreground.is_empty() {
            return Err(Error::InvalidConfig("prototype set needs a foreground class".into()));
        }
        if foreground.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidConfig("duplicate foreground class id".into()));
        }
        if foreground.iter().any(|(id, _)| *id == BACKGROUND) {
            return Err(Error::InvalidConfig(format!(
                "class id {BACKGROUND} is reserved for the background"
            )));
        }
        let dim = background.len();
        if dim == 0 {
            return Err(Error::ShapeMismatch("empty prototype vector".into()));
        }
        let mut prototypes = vec![Prototype {
            class_id: BACKGROUND,
            vector: background,
        }];
        for (class_id, vector) in foreground {
            if vector.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "prototype for class {class_id} has {} channels, expected {dim}",
                    vector.len()
                )));
            }
            prototypes.push(Prototype { class_id, vector });
        }
        if prototypes.iter().flat_map(|p| &p.vector).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite prototype entry".into()));
        }
        Ok(Self { prototypes })
    }

    pub fn background(&self) -> &Prototype {
        &self.prototypes[0]
    }

    pub fn foreground(&self) -> &[Prototype] {
        &self.prototypes[1..]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Prototype> {
        self.prototypes.iter()
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].vector.len()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.prototypes.iter().map(|p| p.class_id).collect()
    }

    pub fn get(&self, class_id: usize) -> Option<&Prototype> {
        self.prototypes.iter().find(|p| p.class_id == class_id)
    }

    /// Position of `class_id` in decode order.
    pub fn index_of(&self, class_id: usize) -> Option<usize> {
        self.prototypes.iter().position(|p| p.class_id == class_id)
    }

    /// Replace the vector for one class. Unknown ids are ignored.
    pub fn with_vector(mut self, class_id: usize, vector: Vec<f64>) -> Self {
        if let Some(p) = self.prototypes.iter_mut().find(|p| p.class_id == class_id) {
            p.vector = vector;
        }
        self
    }
}

/// A support image with ground-truth masks for the classes it contains.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportImage {
    pub features: FeatureMap,
    pub masks: Vec<(usize, BinaryMask)>,
}

impl SupportImage {
    pub fn mask(&self, class_id: usize) -> Option<&BinaryMask> {
        self.masks.iter().find(|(c, _)| *c == class_id).map(|(_, m)| m)
    }

    /// Pixels outside every foreground mask listed in `classes`.
    pub fn background(&self, classes: &[usize]) -> Result<BinaryMask> {
        let fg: Vec<BinaryMask> = self
            .masks
            .iter()
            .filter(|(c, _)| classes.contains(c))
            .map(|(_, m)| m.clone())
            .collect();
        if fg.is_empty() {
            return BinaryMask::ones(self.features.height(), self.features.width());
        }
        background_mask(&fg)
    }
}

/// Sum of the masked-average-pooled support vectors of one class and the
/// number of support images that contributed.
///
/// Support images whose mask for the class is empty are skipped.
pub(crate) fn class_pool_sum(support: &[SupportImage], class_id: usize) -> Result<(Vec<f64>, usize)> {
    let mut sum: Option<Vec<f64>> = None;
    let mut shots = 0usize;
    for image in support {
        let Some(mask) = image.mask(class_id) else {
            continue;
        };
        let pooled = match masked_average_pool(&image.features, mask) {
            Ok(v) => v,
            Err(Error::EmptyMask) => continue,
            Err(e) => return Err(e),
        };
        match sum.as_mut() {
            None => sum = Some(pooled),
            Some(acc) => acc.iter_mut().zip(&pooled).for_each(|(a, v)| *a += v),
        }
        shots += 1;
    }
    Ok((sum.ok_or(Error::EmptyMask)?, shots))
}

/// Mean of the masked-average-pooled support vectors of one class.
///
/// Fails with [`Error::EmptyMask`] only when every support mask of the class
/// is empty.
pub fn class_prototype(support: &[SupportImage], class_id: usize) -> Result<Vec<f64>> {
    let (mut sum, shots) = class_pool_sum(support, class_id)?;
    let k = shots as f64;
    sum.iter_mut().for_each(|a| *a /= k);
    Ok(sum)
}

/// Population mean of the background pixels of all support images.
pub fn background_prototype(support: &[SupportImage], classes: &[usize]) -> Result<Vec<f64>> {
    let (mut bg, count) = background_sum(support, classes)?;
    if count == 0.0 {
        return Err(Error::EmptyBackground);
    }
    bg.iter_mut().for_each(|v| *v /= count);
    Ok(bg)
}

/// Sum of background features over all support images and the pixel count.
pub(crate) fn background_sum(support: &[SupportImage], classes: &[usize]) -> Result<(Vec<f64>, f64)> {
    let dim = support
        .first()
        .map(|s| s.features.dim())
        .ok_or_else(|| Error::InvalidConfig("empty support set".into()))?;
    let mut acc = vec![0.0; dim];
    let mut count = 0.0;
    for image in support {
        if image.features.dim() != dim {
            return Err(Error::ShapeMismatch("support feature dims differ".into()));
        }
        let bg = image.background(classes)?;
        let (s, n) = weighted_sum(&image.features, |j| if bg.get(j) { 1.0 } else { 0.0 });
        acc.iter_mut().zip(&s).for_each(|(a, v)| *a += v);
        count += n;
    }
    Ok((acc, count))
}

/// Original prototypes of an episode: per-class mean of pooled support
/// vectors, and a background prototype pooled over every background pixel of
/// every support image.
pub fn compute_prototypes(support: &[SupportImage], classes: &[usize]) -> Result<PrototypeSet> {
    let bg = background_prototype(support, classes)?;
    let foreground = classes
        .iter()
        .map(|&c| Ok((c, class_prototype(support, c)?)))
        .collect::<Result<Vec<_>>>()?;
    PrototypeSet::new(bg, foreground)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(x: &[f64], p: &[f64]) -> Result<f64> {
    let (nx, np) = (norm(x), norm(p));
    if nx == 0.0 || np == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(x, p) / (nx * np)).clamp(-1.0, 1.0))
}

/// Cosine distance `1 - cos(x, p)` in `[0, 2]`.
pub fn distance(x: &[f64], p: &Prototype) -> Result<f64> {
    Ok(1.0 - cosine_similarity(x, &p.vector)?)
}

/// Per-pixel class distribution, classes in [`PrototypeSet`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    class_ids: Vec<usize>,
    probs: Vec<f64>,
}

impl ProbabilityMap {
    /// Validate and wrap pixel-major probabilities (`probs[j * n + k]`).
    pub fn new(height: usize, width: usize, class_ids: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let n = class_ids.len();
        if n == 0 || probs.len() != height * width * n {
            return Err(Error::ShapeMismatch(format!(
                "probability map {height}x{width} over {n} classes needs {} entries, got {}",
                height * width * n,
                probs.len()
            )));
        }
        for (j, row) in probs.chunks_exact(n).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::ShapeMismatch(format!(
                    "pixel {j} is not a distribution: {row:?}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            class_ids,
            probs,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, j: usize) -> &[f64] {
        let n = self.class_ids.len();
        &self.probs[j * n..(j + 1) * n]
    }

    /// Probability of `class_id` at every pixel.
    pub fn class_confidence(&self, class_id: usize) -> Option<SoftMask> {
        let k = self.class_ids.iter().position(|&c| c == class_id)?;
        let n = self.class_ids.len();
        let values = self.probs.iter().skip(k).step_by(n).copied().collect();
        SoftMask::new(self.height, self.width, values).ok()
    }
}

/// Softmax over `scale * cos(f(x_j), p_c)` at every pixel.
pub fn decode(features: &FeatureMap, prototypes: &PrototypeSet, scale: f64) -> Result<ProbabilityMap> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("decode scale must be positive, got {scale}")));
    }
    if features.dim() != prototypes.dim() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} channels, prototypes {}",
            features.dim(),
            prototypes.dim()
        )));
    }
    let n = prototypes.len();
    let mut probs = Vec::with_capacity(features.num_pixels() * n);
    let mut logits = vec![0.0; n];
    for pixel in features.pixels() {
        for (l, p) in logits.iter_mut().zip(prototypes.iter()) {
            *l = scale * cosine_similarity(pixel, &p.vector)?;
        }
        softmax_into(&logits, &mut probs);
    }
    Ok(ProbabilityMap {
        height: features.height(),
        width: features.width(),
        class_ids: prototypes.class_ids(),
        probs,
    })
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for &l in logits {
        let e = (l - max).exp();
        total += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= total);
}

/// Argmax labels with their winning probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeling {
    height: usize,
    width: usize,
    labels: Vec<usize>,
    confidence: Vec<f64>,
}

impl PseudoLabeling {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Class id per pixel.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    /// `z_j = 1` where the argmax class is `class_id`.
    pub fn mask(&self, class_id: usize) -> BinaryMask {
        BinaryMask::new(
            self.height,
            self.width,
            self.labels.iter().map(|&l| l == class_id).collect(),
        )
        .expect("labeling shape is valid")
    }
}

/// Per-pixel argmax; exact ties go to the lowest class id.
pub fn pseudo_label(prob: &ProbabilityMap) -> PseudoLabeling {
    let n = prob.class_ids.len();
    let mut labels = Vec::with_capacity(prob.num_pixels());
    let mut confidence = Vec::with_capacity(prob.num_pixels());
    for row in prob.probs.chunks_exact(n) {
        let mut best = 0;
        for k in 1..n {
            let better = row[k] > row[best]
                || (row[k] == row[best] && prob.class_ids[k] < prob.class_ids[best]);
            if better {
                best = k;
            }
        }
        labels.push(prob.class_ids[best]);
        confidence.push(row[best]);
    }
    PseudoLabeling {
        height: prob.height,
        width: prob.width,
        labels,
        confidence,
    }
}

/// Ground-truth class id per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    /// One-hot combination of per-class foreground masks; uncovered pixels
    /// are background. Overlapping masks are rejected.
    pub fn from_masks(height: usize, width: usize, masks: &[(usize, BinaryMask)]) -> Result<Self> {
        let mut labels = vec![BACKGROUND; height * width];
        for (class_id, mask) in masks {
            if mask.shape() != (height, width) {
                return Err(Error::ShapeMismatch(format!(
                    "mask for class {class_id} is {:?}, expected {:?}",
                    mask.shape(),
                    (height, width)
                )));
            }
            for (l, &m) in labels.iter_mut().zip(mask.bits()) {
                if m {
                    if *l != BACKGROUND {
                        return Err(Error::ShapeMismatch(format!(
                            "masks for classes {l} and {class_id} overlap"
                        )));
                    }
                    *l = *class_id;
                }
            }
        }
        Self::new(height, width, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn mask(&self, class_id: usize) -> BinaryMask {
        BinaryMask::new(
            self.height,
            self.width,
            self.labels.iter().map(|&l| l == class_id).collect(),
        )
        .expect("label map shape is valid")
    }
}

impl From<&PseudoLabeling> for LabelMap {
    fn from(p: &PseudoLabeling) -> Self {
        Self {
            height: p.height,
            width: p.width,
            labels: p.labels.clone(),
        }
    }
}
