use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::iou::{aggregate, Accumulation, ConfusionCounts, EpisodeMetrics, MetricsReport};
use super::loss::{cross_entropy, LossReport};
use crate::distill::ThresholdNet;
use crate::episodes::{generate_with_bank, AnnotationKind, ClassBank, Episode, InferenceView, SyntheticSpec};
use crate::fusion::{iterative_fusion, FusedPrototypeSet, FusionConfig, Gate, Threshold};
use crate::metric::{compute_prototypes, decode, pseudo_label, LabelMap, ProbabilityMap, PrototypeSet, PseudoLabeling};
use crate::{Error, Result};

/// Prototypes used to decode support images for the support loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SupportLossPrototypes {
    #[default]
    Fused,
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fusion: FusionConfig,
    /// Weight of the support loss in the total.
    pub sup_weight: f64,
    pub accumulation: Accumulation,
    pub support_prototypes: SupportLossPrototypes,
    pub annotation: AnnotationKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            sup_weight: 1.0,
            accumulation: Accumulation::Run,
            support_prototypes: SupportLossPrototypes::Fused,
            annotation: AnnotationKind::Dense,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if !(self.sup_weight >= 0.0 && self.sup_weight.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eval.sup_weight must be non-negative, got {}",
                self.sup_weight
            )));
        }
        Ok(())
    }
}

/// Fused prototypes and query probabilities, computed from the inference view
/// alone.
pub fn segment(
    view: InferenceView<'_>,
    threshold: Threshold<'_>,
    cfg: &FusionConfig,
) -> Result<(FusedPrototypeSet, Vec<ProbabilityMap>)> {
    let inputs = view.fusion_inputs(cfg.include_query);
    let fused = iterative_fusion(&inputs, threshold, Gate::Hard, cfg)?;
    let probs = view
        .query
        .iter()
        .map(|q| decode(&q.features, &fused.prototypes, cfg.scale))
        .collect::<Result<Vec<_>>>()?;
    Ok((fused, probs))
}

/// Mean cross entropy of the support images decoded with `prototypes`
/// against their (possibly weak) masks.
pub fn support_loss(view: InferenceView<'_>, prototypes: &PrototypeSet, scale: f64) -> Result<f64> {
    if view.support.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in view.support {
        let gt = LabelMap::from_masks(s.features.height(), s.features.width(), &s.masks)?;
        total += cross_entropy(&decode(&s.features, prototypes, scale)?, &gt)?;
    }
    Ok(total / view.support.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub counts: ConfusionCounts,
    pub report: MetricsReport,
    pub loss: LossReport,
    pub predictions: Vec<PseudoLabeling>,
    pub fused: FusedPrototypeSet,
}

pub fn run_episode(episode: &Episode, net: &ThresholdNet, cfg: &EvalConfig) -> Result<EpisodeResult> {
    run_episode_with(episode, Threshold::Net(net), cfg)
}

/// Fuse, segment the queries and score them. Support masks are first
/// replaced by `cfg.annotation`, seeded by the episode seed.
pub fn run_episode_with(episode: &Episode, threshold: Threshold<'_>, cfg: &EvalConfig) -> Result<EpisodeResult> {
    cfg.validate()?;
    let annotated;
    let episode = if cfg.annotation == AnnotationKind::Dense {
        episode
    } else {
        annotated = episode.with_support_annotation(cfg.annotation, episode.seed())?;
        &annotated
    };
    let view = episode.inference();
    let scoring = episode.scoring();
    let (fused, probs) = segment(view, threshold, &cfg.fusion)?;

    let mut qry = 0.0;
    for (p, gt) in probs.iter().zip(scoring.query_truth) {
        qry += cross_entropy(p, gt)?;
    }
    qry /= probs.len().max(1) as f64;
    let sup = match cfg.support_prototypes {
        SupportLossPrototypes::Fused => support_loss(view, &fused.prototypes, cfg.fusion.scale)?,
        SupportLossPrototypes::Original => {
            let original = compute_prototypes(view.support, view.classes)?;
            support_loss(view, &original, cfg.fusion.scale)?
        }
    };
    let loss = LossReport::new(qry, sup, cfg.sup_weight);

    let predictions: Vec<PseudoLabeling> = probs.iter().map(pseudo_label).collect();
    let mut counts = ConfusionCounts::new();
    for (p, gt) in predictions.iter().zip(scoring.query_truth) {
        counts.add(p.labels(), gt, view.classes)?;
    }
    let row = EpisodeMetrics {
        run: 0,
        index: 0,
        seed: episode.seed(),
        classes: view.classes.to_vec(),
        mean_iou: Some(counts.mean_iou()),
        loss: Some(loss),
        error: None,
    };
    let report = MetricsReport::from_run(cfg.accumulation, &counts, vec![row]);
    Ok(EpisodeResult {
        counts,
        report,
        loss,
        predictions,
        fused,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub runs: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            runs: 5,
            episodes: 100,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    /// Five runs of 1,000 episodes.
    pub fn full(seed: u64) -> Self {
        Self {
            runs: 5,
            episodes: 1000,
            seed,
        }
    }

    pub fn run_seeds(&self, run: usize) -> Vec<u64> {
        (0..self.episodes).map(|i| episode_seed(self.seed, run, i)).collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Distinct episode seed for `(run, index)` under a base seed.
pub fn episode_seed(base: u64, run: usize, index: usize) -> u64 {
    splitmix(splitmix(base ^ 0x5EED_0000_0000_0000).wrapping_add(((run as u64) << 32) | index as u64))
}

pub(crate) fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {threads} worker threads: {e}")))
}

/// Evaluate one run over the given episode seeds. Episodes are processed in
/// parallel and reduced in seed order, so the result does not depend on
/// `threads` (0 picks the number of cores).
pub fn evaluate_run(
    spec: &SyntheticSpec,
    run: usize,
    seeds: &[u64],
    threshold: Threshold<'_>,
    cfg: &EvalConfig,
    threads: usize,
) -> Result<MetricsReport> {
    spec.validate()?;
    cfg.validate()?;
    let bank = ClassBank::for_spec(spec)?;
    let pool = thread_pool(threads)?;
    let outcomes: Vec<(u64, Result<EpisodeResult>)> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let result =
                    generate_with_bank(&spec.with_seed(seed), &bank).and_then(|ep| run_episode_with(&ep, threshold, cfg));
                (seed, result)
            })
            .collect()
    });
    let mut counts = ConfusionCounts::new();
    let mut rows = Vec::with_capacity(outcomes.len());
    for (index, (seed, outcome)) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => {
                counts.merge(&r.counts);
                let mut row = r.report.episodes.into_iter().next().expect("one row per episode");
                row.run = run;
                row.index = index;
                rows.push(row);
            }
            Err(e) => rows.push(EpisodeMetrics {
                run,
                index,
                seed,
                classes: Vec::new(),
                mean_iou: None,
                loss: None,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(MetricsReport::from_run(cfg.accumulation, &counts, rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub runs: Vec<MetricsReport>,
    pub aggregate: MetricsReport,
}

pub fn evaluate(
    spec: &SyntheticSpec,
    protocol: &EvalProtocol,
    threshold: Threshold<'_>,
    cfg: &EvalConfig,
    threads: usize,
) -> Result<Evaluation> {
    if protocol.runs == 0 || protocol.episodes == 0 {
        return Err(Error::InvalidConfig("eval.runs and eval.episodes must be at least 1".into()));
    }
    let runs = (0..protocol.runs)
        .map(|r| evaluate_run(spec, r, &protocol.run_seeds(r), threshold, cfg, threads))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&runs)?;
    Ok(Evaluation { runs, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::generate_episode;

    #[test]
    fn zero_noise_episode_is_perfect() {
        let spec = SyntheticSpec {
            sigma: 0.0,
            ..SyntheticSpec::clean()
        };
        for seed in 0..5 {
            let ep = generate_episode(&spec.with_seed(seed)).unwrap();
            let r = run_episode(&ep, &ThresholdNet::init(0), &EvalConfig::default()).unwrap();
            assert_eq!(r.report.mean_iou, 1.0);
        }
    }

    #[test]
    fn seeds_are_distinct() {
        let p = EvalProtocol::full(3);
        let mut all: Vec<u64> = (0..p.runs).flat_map(|r| p.run_seeds(r)).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 5000);
    }

    #[test]
    fn thread_count_does_not_change_the_run() {
        let spec = SyntheticSpec::distractor();
        let seeds: Vec<u64> = (0..12).collect();
        let net = ThresholdNet::init(1);
        let cfg = EvalConfig::default();
        let a = evaluate_run(&spec, 0, &seeds, Threshold::Net(&net), &cfg, 1).unwrap();
        let b = evaluate_run(&spec, 0, &seeds, Threshold::Net(&net), &cfg, 4).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }
}
