//! SGD training of the threshold network on the smooth fusion path.
//!
//! During training the distance filter uses the soft indicator, which makes
//! the fused prototypes differentiable in each class threshold. Gradients flow
//! through the last fusion step only: the prototypes that step decodes with,
//! and therefore the distance statistics fed to the network, are treated as
//! constants.

use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, LossReport};
use super::runner::{episode_seed, EvalConfig, SupportLossPrototypes};
use crate::distill::ThresholdNet;
use crate::episodes::{generate_with_bank, AnnotationKind, ClassBank, ClassPool, Episode, SyntheticSpec};
use crate::features::FeatureMap;
use crate::fusion::{fuse_step, max_prototype_shift, ClassTangent, FusionConfig, Gate, PoolingMode, Threshold};
use crate::metric::{compute_prototypes, decode, dot, norm, LabelMap, PrototypeSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Temperature of the soft indicator.
    pub temperature: f64,
    /// Episodes averaged per SGD step.
    pub batch: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            iterations: 2000,
            temperature: 0.1,
            batch: 1,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lr) || !ok(self.momentum) || !ok(self.weight_decay) {
            return Err(Error::InvalidConfig(
                "train.lr, train.momentum and train.weight_decay must be finite and non-negative".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "train.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("train.batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// One SGD update with momentum and L2 weight decay:
/// `g += wd * theta; v = momentum * v + g; theta -= lr * v`.
pub fn sgd_step(params: &mut [f64], velocity: &mut [f64], grad: &[f64], hyper: &TrainHyper) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        let g = g + hyper.weight_decay * *p;
        *v = hyper.momentum * *v + g;
        *p -= hyper.lr * *v;
    }
}

/// Training episodes: iteration `i`, batch slot `b` is a deterministic
/// function of `(seed, i, b)`, drawn from the training class pool.
#[derive(Debug, Clone)]
pub struct TrainStream {
    spec: SyntheticSpec,
    bank: ClassBank,
    seed: u64,
}

impl TrainStream {
    pub fn new(spec: &SyntheticSpec, seed: u64) -> Result<Self> {
        let spec = spec.with_pool(ClassPool::Train);
        spec.validate()?;
        let bank = ClassBank::for_spec(&spec)?;
        Ok(Self { spec, bank, seed })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn episode(&self, iteration: usize, slot: usize) -> Result<Episode> {
        let seed = episode_seed(self.seed, slot, iteration);
        generate_with_bank(&self.spec.with_seed(seed), &self.bank)
    }
}

/// Accumulate `d loss / d prototype` for the mean cross entropy of one image.
fn cross_entropy_grad(
    features: &FeatureMap,
    gt: &LabelMap,
    prototypes: &PrototypeSet,
    scale: f64,
    weight: f64,
    grads: &mut [Vec<f64>],
) -> Result<f64> {
    let prob = decode(features, prototypes, scale)?;
    let loss = cross_entropy(&prob, gt)?;
    let ids = prob.class_ids().to_vec();
    let norms: Vec<f64> = prototypes.iter().map(|p| norm(&p.vector)).collect();
    let n = gt.labels().len() as f64;
    for (j, x) in features.pixels().enumerate() {
        let xn = norm(x);
        let label = gt.labels()[j];
        for (k, p) in prototypes.iter().enumerate() {
            let target = if ids[k] == label { 1.0 } else { 0.0 };
            let coef = weight * scale * (prob.pixel(j)[k] - target) / n;
            if coef == 0.0 {
                continue;
            }
            let cos = dot(x, &p.vector) / (xn * norms[k]);
            let a = coef / (xn * norms[k]);
            let b = coef * cos / (norms[k] * norms[k]);
            for ((g, xv), pv) in grads[k].iter_mut().zip(x).zip(&p.vector) {
                *g += a * xv - b * pv;
            }
        }
    }
    Ok(loss)
}

/// Smooth-path loss of one episode and its gradient in the flat network
/// parameters.
pub fn smooth_loss_and_grad(
    episode: &Episode,
    net: &ThresholdNet,
    cfg: &EvalConfig,
    temperature: f64,
) -> Result<(LossReport, Vec<f64>)> {
    let annotated;
    let episode = if cfg.annotation == AnnotationKind::Dense {
        episode
    } else {
        annotated = episode.with_support_annotation(cfg.annotation, episode.seed())?;
        &annotated
    };
    let view = episode.inference();
    let fusion: &FusionConfig = &cfg.fusion;
    let inputs = view.fusion_inputs(fusion.include_query);
    let gate = Gate::Soft { temperature };
    let original = compute_prototypes(view.support, view.classes)?;
    let mut current = original.clone();
    let mut tangents: Vec<ClassTangent> = Vec::new();
    for _ in 0..fusion.steps {
        let (next, t) = fuse_step(&inputs, Threshold::Net(net), gate, fusion, &current, true)?;
        tangents = t;
        let settled = fusion.convergence_tol > 0.0
            && max_prototype_shift(&current, &next.prototypes)? < fusion.convergence_tol;
        current = next.prototypes;
        if settled {
            break;
        }
    }

    let mut grads: Vec<Vec<f64>> = current.iter().map(|p| vec![0.0; p.vector.len()]).collect();
    let scoring = episode.scoring();
    let q = view.query.len().max(1) as f64;
    let mut qry = 0.0;
    for (img, gt) in view.query.iter().zip(scoring.query_truth) {
        qry += cross_entropy_grad(&img.features, gt, &current, fusion.scale, 1.0 / q, &mut grads)? / q;
    }
    let mut sup = 0.0;
    if !view.support.is_empty() {
        let k = view.support.len() as f64;
        let weight = cfg.sup_weight / k;
        for s in view.support {
            let gt = LabelMap::from_masks(s.features.height(), s.features.width(), &s.masks)?;
            match cfg.support_prototypes {
                SupportLossPrototypes::Fused => {
                    sup += cross_entropy_grad(&s.features, &gt, &current, fusion.scale, weight, &mut grads)? / k;
                }
                SupportLossPrototypes::Original => {
                    sup += cross_entropy(&decode(&s.features, &original, fusion.scale)?, &gt)? / k;
                }
            }
        }
    }
    let loss = LossReport::new(qry, sup, cfg.sup_weight);

    let mut flat = vec![0.0; ThresholdNet::NUM_PARAMS];
    if fusion.mode == PoolingMode::Dsmp {
        for t in &tangents {
            let k = current
                .index_of(t.class_id)
                .ok_or_else(|| Error::InvalidConfig(format!("no prototype for class {}", t.class_id)))?;
            let upstream = dot(&grads[k], &t.d_proto_d_gamma);
            for (f, g) in flat.iter_mut().zip(net.backward(&t.stats, upstream).params_flat()) {
                *f += g;
            }
        }
    }
    Ok((loss, flat))
}

/// Mean smooth-path loss of a batch of episodes with the given net.
pub fn smooth_loss(episodes: &[Episode], net: &ThresholdNet, cfg: &EvalConfig, temperature: f64) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        total += smooth_loss_and_grad(ep, net, cfg, temperature)?.0.total;
    }
    Ok(total / episodes.len().max(1) as f64)
}

pub const CHECKPOINT_FORMAT: &str = "protoseg-train-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete training state; resuming from it reproduces uninterrupted
/// training bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCheckpoint {
    pub net: ThresholdNet,
    pub velocity: Vec<f64>,
    pub iteration: usize,
    pub loss_curve: Vec<LossReport>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    format: String,
    version: u32,
    iteration: usize,
    params: Vec<f64>,
    velocity: Vec<f64>,
    loss_curve: Vec<LossReport>,
}

impl TrainingCheckpoint {
    pub fn start(net: ThresholdNet) -> Self {
        Self {
            net,
            velocity: vec![0.0; ThresholdNet::NUM_PARAMS],
            iteration: 0,
            loss_curve: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let record = CheckpointRecord {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            params: self.net.to_flat(),
            velocity: self.velocity.clone(),
            loss_curve: self.loss_curve.clone(),
        };
        let mut s = serde_json::to_string_pretty(&record)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: CheckpointRecord = serde_json::from_str(text)?;
        if r.format != CHECKPOINT_FORMAT || r.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "expected {CHECKPOINT_FORMAT} version {CHECKPOINT_VERSION}, got {} version {}",
                r.format, r.version
            )));
        }
        if r.velocity.len() != ThresholdNet::NUM_PARAMS || r.loss_curve.len() != r.iteration {
            return Err(Error::Format("checkpoint sizes are inconsistent".into()));
        }
        Ok(Self {
            net: ThresholdNet::from_flat(&r.params)?,
            velocity: r.velocity,
            iteration: r.iteration,
            loss_curve: r.loss_curve,
        })
    }

    /// Loss curve as CSV, one row per completed iteration.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from(LOSS_CURVE_HEADER);
        out.push('\n');
        for (i, l) in self.loss_curve.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", i, l.total, l.qry, l.sup));
        }
        out
    }
}

pub const LOSS_CURVE_HEADER: &str = "iteration,loss_total,loss_qry,loss_sup";

/// Continue training from `state` until `hyper.iterations` steps are done.
pub fn resume_training(
    mut state: TrainingCheckpoint,
    stream: &TrainStream,
    hyper: &TrainHyper,
    cfg: &EvalConfig,
) -> Result<TrainingCheckpoint> {
    hyper.validate()?;
    cfg.validate()?;
    let mut params = state.net.to_flat();
    while state.iteration < hyper.iterations {
        let it = state.iteration;
        let mut grad = vec![0.0; params.len()];
        let mut loss = LossReport::default();
        let inv = 1.0 / hyper.batch as f64;
        for slot in 0..hyper.batch {
            let ep = stream.episode(it, slot)?;
            let (l, g) = smooth_loss_and_grad(&ep, &state.net, cfg, hyper.temperature)?;
            loss.qry += l.qry * inv;
            loss.sup += l.sup * inv;
            loss.total += l.total * inv;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b * inv);
        }
        if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergenceDetected {
                iteration: it,
                loss: loss.total,
            });
        }
        sgd_step(&mut params, &mut state.velocity, &grad, hyper);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::DivergenceDetected {
                iteration: it,
                loss: loss.total,
            });
        }
        state.net = ThresholdNet::from_flat(&params)?;
        state.loss_curve.push(loss);
        state.iteration += 1;
    }
    Ok(state)
}

pub fn train_threshold(
    stream: &TrainStream,
    net: ThresholdNet,
    hyper: &TrainHyper,
    cfg: &EvalConfig,
) -> Result<TrainingCheckpoint> {
    resume_training(TrainingCheckpoint::start(net), stream, hyper, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let hyper = TrainHyper {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainHyper::default()
        };
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &mut v, &[0.5, 1.0], &hyper);
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1 * 1.0]);
    }

    #[test]
    fn momentum_and_decay() {
        let hyper = TrainHyper {
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.1,
            ..TrainHyper::default()
        };
        let mut p = vec![2.0];
        let mut v = vec![1.0];
        sgd_step(&mut p, &mut v, &[0.3], &hyper);
        // g = 0.3 + 0.2, v = 0.9 + 0.5
        assert!((v[0] - 1.4).abs() < 1e-15);
        assert!((p[0] - (2.0 - 0.7)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let spec = SyntheticSpec::distractor();
        let stream = TrainStream::new(&spec, 1).unwrap();
        let hyper = TrainHyper {
            lr: 0.0,
            iterations: 3,
            ..TrainHyper::default()
        };
        let net = ThresholdNet::init(2);
        let out = train_threshold(&stream, net.clone(), &hyper, &EvalConfig::default()).unwrap();
        assert_eq!(out.net, net);
        assert_eq!(out.loss_curve.len(), 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut state = TrainingCheckpoint::start(ThresholdNet::init(4));
        state.velocity[3] = 0.1 + 0.2;
        state.iteration = 1;
        state.loss_curve.push(LossReport::new(0.7, 0.3, 1.0));
        let back = TrainingCheckpoint::from_json(&state.to_json().unwrap()).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn stream_uses_training_classes_only() {
        let spec = SyntheticSpec::distractor();
        let stream = TrainStream::new(&spec, 0).unwrap();
        let split = crate::episodes::ClassSplit::new(spec.bank_size, spec.train_fraction, spec.bank_seed);
        for i in 0..20 {
            let ep = stream.episode(i, 0).unwrap();
            assert!(ep.classes().iter().all(|c| split.train.contains(c)));
        }
    }
}
