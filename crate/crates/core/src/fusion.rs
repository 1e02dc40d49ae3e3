//! Prototype fusion with image-level auxiliary images.
//!
//! One fusion step decodes every auxiliary image with the current prototypes,
//! pools each image tagged with class `c` under its pseudo-mask (optionally
//! restricted by the learned distance filter), and averages the pooled vectors
//! with the support pooled vectors:
//!
//! ```text
//! p~_c = (sum_i MP(support_i) + sum_j SMP(aux_j)) / (K + U_eff)
//! ```
//!
//! Auxiliary images whose effective weight is zero are dropped from both the
//! sum and the denominator. [`iterative_fusion`] repeats the step, each time
//! decoding with the prototypes of the previous step while the support terms
//! stay anchored to the ground-truth masks.

use serde::{Deserialize, Serialize};

use crate::distill::{
    distance_maps, distance_stats, distraction_indicator, normalize_distances, soft_indicator,
    DistanceStats, ThresholdNet,
};
use crate::features::{soft_masked_pool, weighted_sum, FeatureMap, SoftMask};
use crate::metric::{
    background_prototype, class_pool_sum, compute_prototypes, decode, distance, pseudo_label, PrototypeSet,
    SupportImage, BACKGROUND, DEFAULT_SCALE,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    /// Soft-masked pooling under the raw pseudo-mask.
    Smp,
    /// Soft-masked pooling under the pseudo-mask filtered by the threshold net.
    Dsmp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundPolicy {
    /// The background prototype always comes from the support set alone.
    #[default]
    SupportOnly,
    /// The background is fused like a foreground class, using the background
    /// pseudo-mask of every auxiliary image and no distance filter.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: PoolingMode,
    pub steps: usize,
    pub include_query: bool,
    /// Soft-indicator temperature used on the training path.
    pub temperature: f64,
    /// Stop early once no prototype moves by more than this cosine distance.
    /// Zero disables early stopping.
    pub convergence_tol: f64,
    pub background: BackgroundPolicy,
    /// Softmax scale for decoding.
    pub scale: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: PoolingMode::Dsmp,
            steps: 3,
            include_query: false,
            temperature: 0.1,
            convergence_tol: 0.0,
            background: BackgroundPolicy::SupportOnly,
            scale: DEFAULT_SCALE,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "fusion.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.convergence_tol >= 0.0 && self.convergence_tol.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "fusion.convergence_tol must be non-negative, got {}",
                self.convergence_tol
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "fusion.scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

pub fn background_fusion_policy(cfg: &FusionConfig) -> BackgroundPolicy {
    cfg.background
}

/// How the distance filter is applied to pseudo-masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    /// Keep pixels with normalized distance strictly below the threshold.
    Hard,
    /// Weight pixels by `logistic((gamma - d) / temperature)`.
    Soft { temperature: f64 },
}

/// Source of the per-class threshold in [`PoolingMode::Dsmp`].
#[derive(Debug, Clone, Copy)]
pub enum Threshold<'a> {
    Net(&'a ThresholdNet),
    Fixed(f64),
}

impl Threshold<'_> {
    fn gamma(&self, stats: &DistanceStats) -> f64 {
        match self {
            Threshold::Net(net) => net.forward(stats),
            Threshold::Fixed(g) => *g,
        }
    }
}

/// An image with image-level class tags only.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxImage {
    pub features: FeatureMap,
    pub tags: Vec<usize>,
}

/// Everything fusion may look at: support pairs and tagged images.
#[derive(Debug, Clone)]
pub struct FusionInputs<'a> {
    pub classes: &'a [usize],
    pub support: &'a [SupportImage],
    pub pool: Vec<&'a AuxImage>,
}

/// Per-class bookkeeping of one fusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFusion {
    pub class_id: usize,
    /// Support images that contributed pooled vectors.
    pub shots: usize,
    /// Auxiliary images actually fused.
    pub u_eff: usize,
    /// Effective weight `sum_j y_j z_j h_j` of every tagged image, in pool
    /// order; zero for dropped images.
    pub weights: Vec<f64>,
    /// Threshold used, when the distance filter was active.
    pub gamma: Option<f64>,
    pub stats: Option<DistanceStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrototypeSet {
    pub prototypes: PrototypeSet,
    pub classes: Vec<ClassFusion>,
    /// Fusion steps actually performed.
    pub steps_run: usize,
}

impl FusedPrototypeSet {
    fn unfused(prototypes: PrototypeSet) -> Self {
        Self {
            prototypes,
            classes: Vec::new(),
            steps_run: 0,
        }
    }
}

/// Derivative of one fused prototype with respect to its threshold, used by
/// the training path.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ClassTangent {
    pub class_id: usize,
    pub stats: DistanceStats,
    pub d_proto_d_gamma: Vec<f64>,
}

pub fn fuse_once(
    inputs: &FusionInputs<'_>,
    threshold: Threshold<'_>,
    gate: Gate,
    cfg: &FusionConfig,
    current: &PrototypeSet,
) -> Result<FusedPrototypeSet> {
    fuse_step(inputs, threshold, gate, cfg, current, false).map(|(f, _)| f)
}

pub(crate) fn fuse_step(
    inputs: &FusionInputs<'_>,
    threshold: Threshold<'_>,
    gate: Gate,
    cfg: &FusionConfig,
    current: &PrototypeSet,
    with_tangent: bool,
) -> Result<(FusedPrototypeSet, Vec<ClassTangent>)> {
    let probs = inputs
        .pool
        .iter()
        .map(|img| decode(&img.features, current, cfg.scale))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<_> = probs.iter().map(pseudo_label).collect();

    let mut foreground = Vec::with_capacity(inputs.classes.len());
    let mut records = Vec::with_capacity(inputs.classes.len());
    let mut tangents = Vec::new();

    for &c in inputs.classes {
        let (sum, shots) = class_pool_sum(inputs.support, c)?;
        let tagged: Vec<usize> = (0..inputs.pool.len())
            .filter(|&i| inputs.pool[i].tags.contains(&c))
            .collect();

        // Distance filter over the whole pool, decided once per class.
        let mut filter = None;
        if cfg.mode == PoolingMode::Dsmp && !tagged.is_empty() {
            let proto = current
                .get(c)
                .ok_or_else(|| Error::InvalidConfig(format!("no prototype for class {c}")))?;
            let raw = distance_maps(inputs.pool.iter().map(|a| &a.features), proto)?;
            match normalize_distances(&raw) {
                Ok(nd) => {
                    let stats = distance_stats(&nd);
                    let gamma = threshold.gamma(&stats);
                    filter = Some((nd, stats, gamma));
                }
                Err(Error::DegenerateSet) => {}
                Err(e) => return Err(e),
            }
        }

        let mut acc = sum;
        let mut u_eff = 0usize;
        let mut weights = Vec::with_capacity(tagged.len());
        let mut tangent_acc = vec![0.0; acc.len()];
        for &i in &tagged {
            let features = &inputs.pool[i].features;
            let conf = probs[i].class_confidence(c).expect("class is decoded");
            let z = labels[i].mask(c);
            let pooled = match (&filter, gate) {
                (Some((nd, _, gamma)), Gate::Hard) => {
                    let h = distraction_indicator(&nd.grids()[i], *gamma);
                    let kept = crate::features::apply_indicator(&z, &h)?;
                    let w: f64 = (0..kept.len()).filter(|&j| kept.get(j)).map(|j| conf.get(j)).sum();
                    soft_masked_pool(features, &conf, &kept).map(|p| (p, w))
                }
                (Some((nd, _, gamma)), Gate::Soft { temperature }) => {
                    let grid = &nd.grids()[i];
                    let s = soft_indicator(grid, *gamma, temperature)?;
                    let base: Vec<f64> = (0..z.len())
                        .map(|j| if z.get(j) { conf.get(j) } else { 0.0 })
                        .collect();
                    let (num, total) = weighted_sum(features, |j| base[j] * s.get(j));
                    if total <= 0.0 {
                        Err(Error::ZeroEffectiveWeight)
                    } else {
                        let mean: Vec<f64> = num.iter().map(|a| a / total).collect();
                        if with_tangent {
                            // d mean / d gamma = sum_j (f_j - mean) w_j s_j (1 - s_j) / T / W
                            for (j, x) in features.pixels().enumerate() {
                                if base[j] == 0.0 {
                                    continue;
                                }
                                let sj = s.get(j);
                                let dw = base[j] * sj * (1.0 - sj) / temperature;
                                if dw == 0.0 {
                                    continue;
                                }
                                for ((t, &xv), &m) in tangent_acc.iter_mut().zip(x).zip(&mean) {
                                    *t += (xv - m) * dw / total;
                                }
                            }
                        }
                        Ok((mean, total))
                    }
                }
                (None, _) => {
                    let w: f64 = (0..z.len()).filter(|&j| z.get(j)).map(|j| conf.get(j)).sum();
                    soft_masked_pool(features, &conf, &z).map(|p| (p, w))
                }
            };
            match pooled {
                Ok((p, w)) => {
                    acc.iter_mut().zip(&p).for_each(|(a, v)| *a += v);
                    u_eff += 1;
                    weights.push(w);
                }
                Err(Error::ZeroEffectiveWeight) => weights.push(0.0),
                Err(e) => return Err(e),
            }
        }
        let denom = (shots + u_eff) as f64;
        acc.iter_mut().for_each(|a| *a /= denom);
        if with_tangent {
            if let Some((_, stats, _)) = &filter {
                tangents.push(ClassTangent {
                    class_id: c,
                    stats: *stats,
                    d_proto_d_gamma: tangent_acc.iter().map(|t| t / denom).collect(),
                });
            }
        }
        records.push(ClassFusion {
            class_id: c,
            shots,
            u_eff,
            weights,
            gamma: filter.as_ref().map(|f| f.2),
            stats: filter.as_ref().map(|f| f.1),
        });
        foreground.push((c, acc));
    }

    let mut bg = background_prototype(inputs.support, inputs.classes)?;
    if cfg.background == BackgroundPolicy::Symmetric {
        let mut u_eff = 0usize;
        for (i, img) in inputs.pool.iter().enumerate() {
            let conf: SoftMask = probs[i].class_confidence(BACKGROUND).expect("background is decoded");
            match soft_masked_pool(&img.features, &conf, &labels[i].mask(BACKGROUND)) {
                Ok(p) => {
                    bg.iter_mut().zip(&p).for_each(|(a, v)| *a += v);
                    u_eff += 1;
                }
                Err(Error::ZeroEffectiveWeight) => {}
                Err(e) => return Err(e),
            }
        }
        let denom = (1 + u_eff) as f64;
        bg.iter_mut().for_each(|a| *a /= denom);
    }

    let prototypes = PrototypeSet::new(bg, foreground)?;
    Ok((
        FusedPrototypeSet {
            prototypes,
            classes: records,
            steps_run: 1,
        },
        tangents,
    ))
}

/// Largest cosine distance between matching prototypes of two sets.
pub fn max_prototype_shift(a: &PrototypeSet, b: &PrototypeSet) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in a.iter() {
        let q = b
            .get(p.class_id)
            .ok_or_else(|| Error::InvalidConfig(format!("class {} missing", p.class_id)))?;
        worst = worst.max(distance(&p.vector, q)?);
    }
    Ok(worst)
}

/// Original prototypes refined by `cfg.steps` fusion steps.
pub fn iterative_fusion(
    inputs: &FusionInputs<'_>,
    threshold: Threshold<'_>,
    gate: Gate,
    cfg: &FusionConfig,
) -> Result<FusedPrototypeSet> {
    cfg.validate()?;
    let original = compute_prototypes(inputs.support, inputs.classes)?;
    let mut fused = FusedPrototypeSet::unfused(original);
    for step in 0..cfg.steps {
        let mut next = fuse_once(inputs, threshold, gate, cfg, &fused.prototypes)?;
        next.steps_run = step + 1;
        let settled = cfg.convergence_tol > 0.0
            && max_prototype_shift(&fused.prototypes, &next.prototypes)? < cfg.convergence_tol;
        fused = next;
        if settled {
            break;
        }
    }
    Ok(fused)
}
