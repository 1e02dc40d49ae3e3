//! Episodes: support pairs, tagged auxiliary images and held-out queries.
//!
//! Inference code receives an [`InferenceView`], which exposes query features
//! but not their labels. Query ground truth and the generator's class means
//! are reachable only through [`ScoringView`].

pub mod encode;
pub mod format;
pub mod generate;
pub mod weak;

use crate::fusion::{AuxImage, FusionInputs};
use crate::metric::{LabelMap, SupportImage};
use crate::{Error, Result};

pub use encode::{encode, Encoder, Image};
pub use format::{read_episode, write_episode, EpisodeFormat};
pub use generate::{generate_episode, generate_with_bank, ClassBank, ClassPool, ClassSplit, SyntheticSpec};
pub use weak::{bbox_from_mask, scribble_from_mask, scribble_with_length, AnnotationKind, WeakAnnotation};

/// Generator-side facts used only for scoring and oracles.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub class_means: Vec<(usize, Vec<f64>)>,
    pub background_mean: Vec<f64>,
    pub distractor_means: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn class_mean(&self, class_id: usize) -> Option<&[f64]> {
        self.class_means
            .iter()
            .find(|(c, _)| *c == class_id)
            .map(|(_, m)| m.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    seed: u64,
    spec: Option<SyntheticSpec>,
    classes: Vec<usize>,
    support: Vec<SupportImage>,
    aux: Vec<AuxImage>,
    query: Vec<AuxImage>,
    query_truth: Vec<LabelMap>,
    truth: GroundTruth,
}

/// What segmentation and fusion are allowed to see.
#[derive(Debug, Clone, Copy)]
pub struct InferenceView<'a> {
    pub classes: &'a [usize],
    pub support: &'a [SupportImage],
    pub aux: &'a [AuxImage],
    pub query: &'a [AuxImage],
}

impl<'a> InferenceView<'a> {
    /// Fusion pool: auxiliary images, then the queries when `include_query`.
    pub fn fusion_inputs(&self, include_query: bool) -> FusionInputs<'a> {
        let mut pool: Vec<&AuxImage> = self.aux.iter().collect();
        if include_query {
            pool.extend(self.query.iter());
        }
        FusionInputs {
            classes: self.classes,
            support: self.support,
            pool,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScoringView<'a> {
    pub query_truth: &'a [LabelMap],
    pub truth: &'a GroundTruth,
}

impl Episode {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        seed: u64,
        spec: Option<SyntheticSpec>,
        classes: Vec<usize>,
        support: Vec<SupportImage>,
        aux: Vec<AuxImage>,
        query: Vec<AuxImage>,
        query_truth: Vec<LabelMap>,
        truth: GroundTruth,
    ) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Format("episode has no classes".into()));
        }
        let mut sorted = classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != classes.len() || sorted.contains(&crate::metric::BACKGROUND) {
            return Err(Error::Format(format!("invalid episode class set {classes:?}")));
        }
        for s in &support {
            for (c, m) in &s.masks {
                if !classes.contains(c) {
                    return Err(Error::Format(format!("support mask for class {c} outside the episode")));
                }
                if m.shape() != (s.features.height(), s.features.width()) {
                    return Err(Error::ShapeMismatch("support mask and features differ in shape".into()));
                }
            }
        }
        for a in &aux {
            if a.tags.is_empty() || a.tags.iter().any(|t| !classes.contains(t)) {
                return Err(Error::Format(format!("auxiliary tags {:?} outside the episode", a.tags)));
            }
        }
        if query.len() != query_truth.len() {
            return Err(Error::Format(format!(
                "{} query images but {} label maps",
                query.len(),
                query_truth.len()
            )));
        }
        for (q, gt) in query.iter().zip(&query_truth) {
            if (q.features.height(), q.features.width()) != (gt.height(), gt.width()) {
                return Err(Error::ShapeMismatch("query labels and features differ in shape".into()));
            }
        }
        Ok(Self {
            seed,
            spec,
            classes,
            support,
            aux,
            query,
            query_truth,
            truth,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn spec(&self) -> Option<&SyntheticSpec> {
        self.spec.as_ref()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn inference(&self) -> InferenceView<'_> {
        InferenceView {
            classes: &self.classes,
            support: &self.support,
            aux: &self.aux,
            query: &self.query,
        }
    }

    pub fn scoring(&self) -> ScoringView<'_> {
        ScoringView {
            query_truth: &self.query_truth,
            truth: &self.truth,
        }
    }

    /// Replace every support mask by the given annotation kind. Each mask gets
    /// its own seed derived from `seed`, the image index and the class.
    pub fn with_support_annotation(&self, kind: AnnotationKind, seed: u64) -> Result<Self> {
        if kind == AnnotationKind::Dense {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        for (i, s) in out.support.iter_mut().enumerate() {
            for (c, mask) in s.masks.iter_mut() {
                let mask_seed = seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((i as u64) << 20)
                    .wrapping_add(*c as u64);
                *mask = WeakAnnotation::from_dense(kind, mask, mask_seed)?.mask;
            }
        }
        Ok(out)
    }

    pub fn into_parts(self) -> EpisodeParts {
        EpisodeParts {
            seed: self.seed,
            spec: self.spec,
            classes: self.classes,
            support: self.support,
            aux: self.aux,
            query: self.query,
            query_truth: self.query_truth,
            truth: self.truth,
        }
    }
}

pub struct EpisodeParts {
    pub seed: u64,
    pub spec: Option<SyntheticSpec>,
    pub classes: Vec<usize>,
    pub support: Vec<SupportImage>,
    pub aux: Vec<AuxImage>,
    pub query: Vec<AuxImage>,
    pub query_truth: Vec<LabelMap>,
    pub truth: GroundTruth,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_split_inference_from_scoring() {
        let ep = generate_episode(&SyntheticSpec::clean().with_seed(3)).unwrap();
        let v = ep.inference();
        assert_eq!(v.fusion_inputs(false).pool.len(), 4);
        assert_eq!(v.fusion_inputs(true).pool.len(), 5);
        assert_eq!(ep.scoring().query_truth.len(), v.query.len());
    }

    #[test]
    fn same_seed_same_episode() {
        let spec = SyntheticSpec::distractor().with_seed(17);
        assert_eq!(generate_episode(&spec).unwrap(), generate_episode(&spec).unwrap());
        assert_ne!(
            generate_episode(&spec).unwrap(),
            generate_episode(&spec.with_seed(18)).unwrap()
        );
    }

    #[test]
    fn weak_support_is_contained() {
        let ep = generate_episode(&SyntheticSpec::clean().with_seed(5)).unwrap();
        for kind in AnnotationKind::ALL {
            let weak = ep.with_support_annotation(kind, 1).unwrap();
            for (a, b) in weak.inference().support.iter().zip(ep.inference().support) {
                let (c, wm) = &a.masks[0];
                let dense = b.mask(*c).unwrap();
                match kind {
                    AnnotationKind::Scribble => assert!(wm.is_subset_of(dense)),
                    _ => assert!(dense.is_subset_of(wm)),
                }
            }
        }
    }

    #[test]
    fn from_parts_rejects_foreign_tags() {
        let ep = generate_episode(&SyntheticSpec::clean()).unwrap();
        let mut p = ep.into_parts();
        p.aux[0].tags = vec![999];
        assert!(Episode::from_parts(p.seed, p.spec, p.classes, p.support, p.aux, p.query, p.query_truth, p.truth).is_err());
    }
}
