//! Few-shot segmentation with prototypes refined from image-level tagged images.

pub mod distill;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod metric;

pub use error::{Error, Result};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/pooling.md")]
    struct Pooling;
    #[doc = include_str!("../../../book/src/prototypes.md")]
    struct Prototypes;
    #[doc = include_str!("../../../book/src/distillation.md")]
    struct Distillation;
    #[doc = include_str!("../../../book/src/fusion.md")]
    struct Fusion;
    #[doc = include_str!("../../../book/src/episodes.md")]
    struct Episodes;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
}
