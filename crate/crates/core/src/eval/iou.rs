use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::loss::LossReport;
use crate::metric::{LabelMap, PseudoLabeling, BACKGROUND};
use crate::{Error, Result};

/// How IoU is turned into a run-level mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Accumulation {
    /// Sum TP/FP/FN over every query pixel of the run, then divide.
    #[default]
    Run,
    /// Average the per-episode mean IoUs.
    PerEpisode,
}

/// Per-class true positive, false positive and false negative pixel counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    counts: BTreeMap<usize, [u64; 3]>,
}

impl ConfusionCounts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Count one prediction against its ground truth for the given foreground
    /// classes. Background is never scored.
    pub fn add(&mut self, pred: &[usize], gt: &LabelMap, classes: &[usize]) -> Result<()> {
        if pred.len() != gt.labels().len() {
            return Err(Error::ShapeMismatch(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.labels().len()
            )));
        }
        for &c in classes.iter().filter(|&&c| c != BACKGROUND) {
            let entry = self.counts.entry(c).or_insert([0; 3]);
            for (&p, &g) in pred.iter().zip(gt.labels()) {
                match (p == c, g == c) {
                    (true, true) => entry[0] += 1,
                    (true, false) => entry[1] += 1,
                    (false, true) => entry[2] += 1,
                    (false, false) => {}
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (&c, o) in &other.counts {
            let e = self.counts.entry(c).or_insert([0; 3]);
            for k in 0..3 {
                e[k] += o[k];
            }
        }
    }

    pub fn get(&self, class_id: usize) -> Option<[u64; 3]> {
        self.counts.get(&class_id).copied()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both
    /// prediction and ground truth.
    pub fn iou(&self, class_id: usize) -> Option<f64> {
        let [tp, fp, fn_] = self.get(class_id)?;
        let union = tp + fp + fn_;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn per_class(&self) -> Vec<ClassIou> {
        self.counts
            .iter()
            .filter_map(|(&c, &[tp, fp, fn_])| {
                self.iou(c).map(|iou| ClassIou {
                    class_id: c,
                    iou,
                    tp,
                    fp,
                    fn_,
                })
            })
            .collect()
    }

    /// Mean IoU over scored classes; 1.0 when no class is present at all,
    /// since an empty prediction of an empty truth is exact.
    pub fn mean_iou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class().iter().map(|c| c.iou).collect();
        if ious.is_empty() {
            1.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: usize,
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// One row of a run: an episode either scored or failed with a message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub run: usize,
    pub index: usize,
    pub seed: u64,
    pub classes: Vec<usize>,
    pub mean_iou: Option<f64>,
    pub loss: Option<LossReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accumulation: Accumulation,
    pub runs: usize,
    pub episode_count: usize,
    pub failed: usize,
    pub seeds: Vec<u64>,
    /// Mean IoU; for aggregates, the mean over runs.
    pub mean_iou: f64,
    /// Population standard deviation of the run means (0 for one run).
    pub std_iou: f64,
    pub run_mean_iou: Vec<f64>,
    pub per_class: Vec<ClassIou>,
    pub episodes: Vec<EpisodeMetrics>,
}

/// Fixed header of [`MetricsReport::to_csv`].
pub const EPISODE_CSV_HEADER: &str = "run,episode,seed,classes,mean_iou,loss_qry,loss_sup,loss_total,status";

impl MetricsReport {
    /// Report of one run from its accumulated counts and episode rows.
    pub fn from_run(accumulation: Accumulation, counts: &ConfusionCounts, episodes: Vec<EpisodeMetrics>) -> Self {
        let mean_iou = match accumulation {
            Accumulation::Run => counts.mean_iou(),
            Accumulation::PerEpisode => {
                let scored: Vec<f64> = episodes.iter().filter_map(|e| e.mean_iou).collect();
                if scored.is_empty() {
                    1.0
                } else {
                    scored.iter().sum::<f64>() / scored.len() as f64
                }
            }
        };
        Self {
            accumulation,
            runs: 1,
            episode_count: episodes.len(),
            failed: episodes.iter().filter(|e| e.error.is_some()).count(),
            seeds: episodes.iter().map(|e| e.seed).collect(),
            mean_iou,
            std_iou: 0.0,
            run_mean_iou: vec![mean_iou],
            per_class: counts.per_class(),
            episodes,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per episode under [`EPISODE_CSV_HEADER`]. Classes are joined
    /// with `;`; failed episodes leave the numeric columns empty and carry
    /// `error: <message>` in `status`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EPISODE_CSV_HEADER);
        out.push('\n');
        for e in &self.episodes {
            let classes: Vec<String> = e.classes.iter().map(usize::to_string).collect();
            let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let status = match &e.error {
                None => "ok".to_string(),
                Some(msg) => format!("\"error: {}\"", msg.replace('"', "'")),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                e.run,
                e.index,
                e.seed,
                classes.join(";"),
                num(e.mean_iou),
                num(e.loss.map(|l| l.qry)),
                num(e.loss.map(|l| l.sup)),
                num(e.loss.map(|l| l.total)),
                status
            );
        }
        out
    }
}

/// Score predictions against ground truth as a single run.
pub fn mean_iou(predictions: &[PseudoLabeling], ground_truth: &[LabelMap], classes: &[usize]) -> Result<MetricsReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} ground-truth maps",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut counts = ConfusionCounts::new();
    for (p, g) in predictions.iter().zip(ground_truth) {
        counts.add(p.labels(), g, classes)?;
    }
    Ok(MetricsReport::from_run(Accumulation::Run, &counts, Vec::new()))
}

/// Mean and population standard deviation of the run means; per-class IoUs
/// are averaged over the runs that scored the class, counts are summed.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidConfig("cannot aggregate an empty list of reports".into()))?;
    if reports.len() == 1 {
        return Ok(first.clone());
    }
    let run_means: Vec<f64> = reports.iter().flat_map(|r| r.run_mean_iou.iter().copied()).collect();
    let n = run_means.len() as f64;
    let mean = run_means.iter().sum::<f64>() / n;
    let var = run_means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;

    let mut classes: BTreeMap<usize, (f64, usize, [u64; 3])> = BTreeMap::new();
    for r in reports {
        for c in &r.per_class {
            let e = classes.entry(c.class_id).or_insert((0.0, 0, [0; 3]));
            e.0 += c.iou;
            e.1 += 1;
            e.2[0] += c.tp;
            e.2[1] += c.fp;
            e.2[2] += c.fn_;
        }
    }
    Ok(MetricsReport {
        accumulation: first.accumulation,
        runs: reports.iter().map(|r| r.runs).sum(),
        episode_count: reports.iter().map(|r| r.episode_count).sum(),
        failed: reports.iter().map(|r| r.failed).sum(),
        seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        mean_iou: mean,
        std_iou: var.sqrt(),
        run_mean_iou: run_means,
        per_class: classes
            .into_iter()
            .map(|(class_id, (sum, k, [tp, fp, fn_]))| ClassIou {
                class_id,
                iou: sum / k as f64,
                tp,
                fp,
                fn_,
            })
            .collect(),
        episodes: reports.iter().flat_map(|r| r.episodes.iter().cloned()).collect(),
    })
}
