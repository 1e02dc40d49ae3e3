use serde::{Deserialize, Serialize};

use crate::metric::{LabelMap, ProbabilityMap};
use crate::{Error, Result};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Mean over pixels of `-ln p(true class)`, with `p` clamped to `[1e-12, 1]`.
pub fn cross_entropy(prob: &ProbabilityMap, gt: &LabelMap) -> Result<f64> {
    if (prob.height(), prob.width()) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch(format!(
            "probabilities are {}x{}, labels are {}x{}",
            prob.height(),
            prob.width(),
            gt.height(),
            gt.width()
        )));
    }
    let ids = prob.class_ids();
    let mut total = 0.0;
    for (j, &label) in gt.labels().iter().enumerate() {
        let k = ids
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::ShapeMismatch(format!("label {label} is not a decoded class")))?;
        total -= prob.pixel(j)[k].clamp(PROB_CLAMP, 1.0).ln();
    }
    Ok(total / gt.labels().len() as f64)
}

/// Query and support losses of one episode, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub qry: f64,
    pub sup: f64,
    /// `qry + sup_weight * sup`.
    pub total: f64,
}

impl LossReport {
    pub fn new(qry: f64, sup: f64, sup_weight: f64) -> Self {
        Self {
            qry,
            sup,
            total: qry + sup_weight * sup,
        }
    }
}
