use std::path::Path;
use std::process::Command;

use protoseg::distill::ThresholdNet;
use protoseg::episodes::{generate_with_bank, read_episode, ClassBank, SyntheticSpec};
use protoseg::eval::{episode_seed, TrainingCheckpoint};
use protoseg_cli::commands::{ABLATION_HEADER, CHECKPOINT_FILE, CURVE_FILE, METRICS_FILE, NET_FILE};
use protoseg_cli::{run, CliError};

const SMALL: &str = "version = 1\nseed = 5\n[episode]\nheight = 16\nwidth = 16\n[eval]\nruns = 1\nepisodes = 4\n";

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn cli(args: &[&str]) -> Result<protoseg_cli::Outcome, CliError> {
    run(std::iter::once("protoseg").chain(args.iter().copied()))
}

fn metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(METRICS_FILE)).unwrap()).unwrap()
}

#[test]
fn generated_files_load_back_to_the_same_episodes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    for format in ["json", "base64", "binary"] {
        let out = tmp.path().join(format);
        let o = cli(&["generate", "-c", &config, "--format", format, "-o", out.to_str().unwrap()]).unwrap();
        assert_eq!(o.written.len(), 4);
        let spec = SyntheticSpec {
            height: 16,
            width: 16,
            ..SyntheticSpec::clean()
        };
        let bank = ClassBank::for_spec(&spec).unwrap();
        for (i, path) in o.written.iter().enumerate() {
            let bytes = std::fs::read(path).unwrap();
            let want = generate_with_bank(&spec.with_seed(episode_seed(5, 0, i)), &bank).unwrap();
            assert_eq!(read_episode(&bytes).unwrap(), want);
        }
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    cli(&["generate", "-c", &config, "-o", a.to_str().unwrap()]).unwrap();
    cli(&["generate", "-c", &config, "-o", b.to_str().unwrap()]).unwrap();
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn malformed_config_exits_nonzero_and_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "version = 1\n[fusion]\nstesp = 3\n");
    let out = Command::new(env!("CARGO_BIN_EXE_protoseg"))
        .args(["evaluate", "-c", &config, "-o"])
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stesp"), "{stderr}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn existing_outputs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let bin = env!("CARGO_BIN_EXE_protoseg");
    let status = |force: bool| {
        let mut c = Command::new(bin);
        c.args(["generate", "-c", &config, "-o"]).arg(&out);
        if force {
            c.arg("--force");
        }
        c.output().unwrap().status.code()
    };
    assert_eq!(status(false), Some(0));
    assert_eq!(status(false), Some(1));
    assert_eq!(status(true), Some(0));
}

#[test]
fn zero_iterations_keep_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    cli(&["train", "-c", &config, "--iterations", "0", "-o", out.to_str().unwrap()]).unwrap();
    let net = ThresholdNet::from_json(&std::fs::read_to_string(out.join(NET_FILE)).unwrap()).unwrap();
    assert_eq!(net, ThresholdNet::init(5));
    assert_eq!(std::fs::read_to_string(out.join(CURVE_FILE)).unwrap().lines().count(), 1);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let full = tmp.path().join("full");
    let half = tmp.path().join("half");
    let rest = tmp.path().join("rest");
    cli(&["train", "-c", &config, "--iterations", "4", "-o", full.to_str().unwrap()]).unwrap();
    cli(&["train", "-c", &config, "--iterations", "2", "-o", half.to_str().unwrap()]).unwrap();
    let ckpt = half.join(CHECKPOINT_FILE);
    cli(&[
        "train",
        "-c",
        &config,
        "--iterations",
        "4",
        "--resume",
        ckpt.to_str().unwrap(),
        "-o",
        rest.to_str().unwrap(),
    ])
    .unwrap();
    for name in [NET_FILE, CURVE_FILE, CHECKPOINT_FILE] {
        assert_eq!(std::fs::read(full.join(name)).unwrap(), std::fs::read(rest.join(name)).unwrap(), "{name}");
    }
    let curve = std::fs::read_to_string(full.join(CURVE_FILE)).unwrap();
    assert_eq!(curve.lines().count(), 1 + 4);
    let state = TrainingCheckpoint::from_json(&std::fs::read_to_string(full.join(CHECKPOINT_FILE)).unwrap()).unwrap();
    assert_eq!(state.iteration, 4);

    // a checkpoint past the target is refused
    let err = cli(&["train", "-c", &config, "--iterations", "1", "--resume", ckpt.to_str().unwrap()]).unwrap_err();
    assert!(err.to_string().contains("train.iterations"), "{err}");
}

#[test]
fn zero_noise_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &format!("{SMALL}\n").replace("width = 16\n", "width = 16\nsigma = 0.0\n"));
    let out = tmp.path().join("out");
    let o = cli(&["evaluate", "-c", &config, "-o", out.to_str().unwrap()]).unwrap();
    assert_eq!(o.exit_code(), 0);
    assert_eq!(metrics(&out)["mean_iou"].as_f64(), Some(1.0));
    assert_eq!(std::fs::read_to_string(out.join("episodes.csv")).unwrap().lines().count(), 1 + 4);
}

#[test]
fn ablation_has_one_row_per_cell_and_cells_match_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &SMALL.replace("episodes = 4", "episodes = 2"));
    let out = tmp.path().join("ablate");
    cli(&["ablate", "-c", &config, "-o", out.to_str().unwrap()]).unwrap();
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], ABLATION_HEADER);
    assert_eq!(rows.len(), 1 + 2 * 2 * 3);

    for row in &rows[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        let (mode, steps, annotation) = (cols[0], cols[1], cols[2]);
        if annotation == "dense" && steps == "3" || annotation == "bbox" && mode == "smp" && steps == "1" {
            let dir = tmp.path().join(format!("{mode}-{steps}-{annotation}"));
            cli(&[
                "evaluate",
                "-c",
                &config,
                "--mode",
                mode,
                "--steps",
                steps,
                "--annotation",
                annotation,
                "-o",
                dir.to_str().unwrap(),
            ])
            .unwrap();
            let mean: f64 = cols[6].parse().unwrap();
            assert_eq!(metrics(&dir)["mean_iou"].as_f64(), Some(mean), "{row}");
        }
    }
}

#[test]
fn unknown_flag_values_are_rejected() {
    assert!(matches!(cli(&["evaluate", "--mode", "mp"]), Err(CliError::Config(_))));
    assert!(matches!(cli(&["evaluate", "--annotation", "polygon"]), Err(CliError::Config(_))));
    assert!(matches!(cli(&["generate", "--format", "yaml"]), Err(CliError::Config(_))));
}
