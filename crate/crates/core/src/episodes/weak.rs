//! Weak support annotations derived from dense masks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::BinaryMask;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    #[default]
    Dense,
    Scribble,
    Bbox,
}

impl AnnotationKind {
    pub const ALL: [AnnotationKind; 3] = [AnnotationKind::Dense, AnnotationKind::Scribble, AnnotationKind::Bbox];

    pub fn name(self) -> &'static str {
        match self {
            AnnotationKind::Dense => "dense",
            AnnotationKind::Scribble => "scribble",
            AnnotationKind::Bbox => "bbox",
        }
    }
}

impl std::str::FromStr for AnnotationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(AnnotationKind::Dense),
            "scribble" => Ok(AnnotationKind::Scribble),
            "bbox" => Ok(AnnotationKind::Bbox),
            other => Err(Error::InvalidConfig(format!(
                "unknown annotation `{other}` (expected dense, scribble or bbox)"
            ))),
        }
    }
}

/// A support mask as a given annotation kind would provide it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakAnnotation {
    pub kind: AnnotationKind,
    pub mask: BinaryMask,
}

impl WeakAnnotation {
    pub fn from_dense(kind: AnnotationKind, dense: &BinaryMask, seed: u64) -> Result<Self> {
        let mask = match kind {
            AnnotationKind::Dense => dense.clone(),
            AnnotationKind::Scribble => scribble_from_mask(dense, seed)?,
            AnnotationKind::Bbox => bbox_from_mask(dense)?,
        };
        Ok(Self { kind, mask })
    }
}

/// Default scribble length: a quarter of the mask, capped at 40, at least 1.
pub fn default_scribble_length(mask_pixels: usize) -> usize {
    (mask_pixels / 4).clamp(1, 40)
}

pub fn scribble_from_mask(mask: &BinaryMask, seed: u64) -> Result<BinaryMask> {
    scribble_with_length(mask, seed, default_scribble_length(mask.count()))
}

/// Self-avoiding 4-connected random walk of up to `length` pixels inside the
/// mask. The walk stops early when the head has no unvisited neighbor.
pub fn scribble_with_length(mask: &BinaryMask, seed: u64, length: usize) -> Result<BinaryMask> {
    let inside: Vec<usize> = (0..mask.len()).filter(|&j| mask.get(j)).collect();
    if inside.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (h, w) = mask.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visited = vec![false; mask.len()];
    let mut head = inside[rng.random_range(0..inside.len())];
    visited[head] = true;
    let mut steps = 1;
    let mut options = Vec::with_capacity(4);
    while steps < length.max(1) {
        let (r, c) = (head / w, head % w);
        options.clear();
        if r > 0 {
            options.push(head - w);
        }
        if r + 1 < h {
            options.push(head + w);
        }
        if c > 0 {
            options.push(head - 1);
        }
        if c + 1 < w {
            options.push(head + 1);
        }
        options.retain(|&j| mask.get(j) && !visited[j]);
        let Some(&next) = options.choose(&mut rng) else {
            break;
        };
        visited[next] = true;
        head = next;
        steps += 1;
    }
    BinaryMask::new(h, w, visited)
}

/// Filled tight axis-aligned bounding rectangle of the mask.
pub fn bbox_from_mask(mask: &BinaryMask) -> Result<BinaryMask> {
    let (h, w) = mask.shape();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..h {
        for c in 0..w {
            if mask.at(r, c) {
                bounds = Some(match bounds {
                    None => (r, r, c, c),
                    Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                });
            }
        }
    }
    let (r0, r1, c0, c1) = bounds.ok_or(Error::EmptyMask)?;
    BinaryMask::from_fn(h, w, |r, c| (r0..=r1).contains(&r) && (c0..=c1).contains(&c))
}
