use std::fmt::Write as _;
use std::path::Path;

use protoseg::distill::ThresholdNet;
use protoseg::episodes::{generate_with_bank, write_episode, ClassBank, EpisodeFormat};
use protoseg::eval::{episode_seed, evaluate, resume_training, Evaluation, TrainStream, TrainingCheckpoint};
use protoseg::fusion::{PoolingMode, Threshold};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::Outputs;

pub const METRICS_FILE: &str = "metrics.json";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const NET_FILE: &str = "net.json";
pub const CURVE_FILE: &str = "loss_curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_HEADER: &str = "mode,steps,annotation,runs,episodes,failed,mean_iou,std_iou,run_mean_iou";

/// What a command produced, before anything is written.
#[derive(Debug)]
pub struct Product {
    pub outputs: Outputs,
    pub summary: String,
    /// Episodes that could not be scored.
    pub failed: usize,
}

/// File name of the `index`-th generated episode.
pub fn episode_file_name(index: usize, format: EpisodeFormat) -> String {
    let ext = match format {
        EpisodeFormat::Binary => "bin",
        EpisodeFormat::Json | EpisodeFormat::Base64 => "json",
    };
    format!("episode-{index:04}.{ext}")
}

/// The configured net, or the seeded initialization.
pub fn load_net(cfg: &RunConfig) -> Result<ThresholdNet> {
    match &cfg.net {
        None => Ok(ThresholdNet::init(cfg.seed)),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            ThresholdNet::from_json(&text).map_err(|source| CliError::Load {
                path: path.clone(),
                source,
            })
        }
    }
}

/// The episodes of run 0 of `evaluate`, one file each.
pub fn generate(cfg: &RunConfig) -> Result<Product> {
    let bank = ClassBank::for_spec(&cfg.spec)?;
    let mut outputs = Outputs::new();
    for index in 0..cfg.protocol.episodes {
        let seed = episode_seed(cfg.seed, 0, index);
        let ep = generate_with_bank(&cfg.spec.with_seed(seed), &bank)?;
        outputs.add(episode_file_name(index, cfg.output.format), write_episode(&ep, cfg.output.format)?);
    }
    let summary = format!("generated {} episodes", outputs.len());
    Ok(Product {
        outputs,
        summary,
        failed: 0,
    })
}

fn run_evaluation(cfg: &RunConfig, net: &ThresholdNet) -> Result<Evaluation> {
    Ok(evaluate(
        &cfg.spec,
        &cfg.protocol,
        Threshold::Net(net),
        &cfg.eval,
        cfg.threads,
    )?)
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<Product> {
    let net = load_net(cfg)?;
    let report = run_evaluation(cfg, &net)?.aggregate;
    let mut outputs = Outputs::new();
    outputs.add(METRICS_FILE, report.to_json()?);
    outputs.add(EPISODES_FILE, report.to_csv());
    Ok(Product {
        outputs,
        summary: format!(
            "mean IoU {:.4} (std {:.4}) over {} runs of {} episodes, {} failed",
            report.mean_iou, report.std_iou, report.runs, cfg.protocol.episodes, report.failed
        ),
        failed: report.failed,
    })
}

/// Train the threshold net on the training classes, from the seeded
/// initialization or from `resume`.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<Product> {
    let state = match resume {
        None => TrainingCheckpoint::start(ThresholdNet::init(cfg.seed)),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            TrainingCheckpoint::from_json(&text).map_err(|source| CliError::Load {
                path: path.to_path_buf(),
                source,
            })?
        }
    };
    if state.iteration > cfg.train.iterations {
        return Err(CliError::Config(format!(
            "train.iterations: checkpoint is already at iteration {}, past the requested {}",
            state.iteration, cfg.train.iterations
        )));
    }
    let stream = TrainStream::new(&cfg.spec, cfg.seed)?;
    let done = resume_training(state, &stream, &cfg.train, &cfg.eval)?;
    let mut outputs = Outputs::new();
    outputs.add(NET_FILE, done.net.to_json()? + "\n");
    outputs.add(CURVE_FILE, done.curve_csv());
    outputs.add(CHECKPOINT_FILE, done.to_json()?);
    let summary = match done.loss_curve.last() {
        Some(l) => format!("trained {} iterations, last loss {:.6}", done.iteration, l.total),
        None => "no iterations requested; net is the initialization".to_string(),
    };
    Ok(Product {
        outputs,
        summary,
        failed: 0,
    })
}

fn mode_name(mode: PoolingMode) -> &'static str {
    match mode {
        PoolingMode::Smp => "smp",
        PoolingMode::Dsmp => "dsmp",
    }
}

/// One `evaluate` per cell of modes x steps x annotations.
pub fn ablate(cfg: &RunConfig) -> Result<Product> {
    let net = load_net(cfg)?;
    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    let mut failed = 0;
    let mut cells = 0;
    for &mode in &cfg.ablate.modes {
        for &steps in &cfg.ablate.steps {
            for &annotation in &cfg.ablate.annotations {
                let mut cell = cfg.clone();
                cell.eval.fusion.mode = mode;
                cell.eval.fusion.steps = steps;
                cell.eval.annotation = annotation;
                cell.validate()?;
                let r = run_evaluation(&cell, &net)?.aggregate;
                let means: Vec<String> = r.run_mean_iou.iter().map(f64::to_string).collect();
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{}",
                    mode_name(mode),
                    steps,
                    annotation.name(),
                    r.runs,
                    cfg.protocol.episodes,
                    r.failed,
                    r.mean_iou,
                    r.std_iou,
                    means.join(";")
                );
                failed += r.failed;
                cells += 1;
            }
        }
    }
    let mut outputs = Outputs::new();
    outputs.add(ABLATION_FILE, csv);
    Ok(Product {
        outputs,
        summary: format!("{cells} ablation cells, {failed} failed episodes"),
        failed,
    })
}
