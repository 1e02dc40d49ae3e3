//! Declarative run configuration: one TOML file plus flag overrides.
//!
//! ```toml
//! version = 1
//! seed = 7
//! profile = "distractor"
//!
//! [episode]
//! sigma = 0.2
//!
//! [fusion]
//! mode = "dsmp"
//! steps = 3
//!
//! [eval]
//! runs = 5
//! episodes = 100
//! ```
//!
//! `[episode]` keys override the chosen profile one by one. Every other
//! section starts from its defaults. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use protoseg::episodes::{AnnotationKind, ClassBank, EpisodeFormat, SyntheticSpec};
use protoseg::eval::{Accumulation, EvalConfig, EvalProtocol, SupportLossPrototypes, TrainHyper};
use protoseg::fusion::{FusionConfig, PoolingMode};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Base episode generator settings that `[episode]` refines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Clean,
    Distractor,
}

impl Profile {
    pub fn spec(self) -> SyntheticSpec {
        match self {
            Profile::Clean => SyntheticSpec::clean(),
            Profile::Distractor => SyntheticSpec::distractor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub runs: usize,
    pub episodes: usize,
    /// Worker threads; 0 uses every core. Never changes the results.
    pub threads: usize,
    pub sup_weight: f64,
    pub accumulation: Accumulation,
    pub support_prototypes: SupportLossPrototypes,
    pub annotation: AnnotationKind,
    /// Serialized threshold net; the seeded initialization when absent.
    pub net: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let cfg = EvalConfig::default();
        let protocol = EvalProtocol::default();
        Self {
            runs: protocol.runs,
            episodes: protocol.episodes,
            threads: 0,
            sup_weight: cfg.sup_weight,
            accumulation: cfg.accumulation,
            support_prototypes: cfg.support_prototypes,
            annotation: cfg.annotation,
            net: None,
        }
    }
}

/// Axes of the ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub modes: Vec<PoolingMode>,
    pub steps: Vec<usize>,
    pub annotations: Vec<AnnotationKind>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            modes: vec![PoolingMode::Smp, PoolingMode::Dsmp],
            steps: vec![1, 3],
            annotations: AnnotationKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Encoding of generated episode files.
    pub format: EpisodeFormat,
    pub force: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            format: EpisodeFormat::Json,
            force: false,
        }
    }
}

/// The file as written, before the profile is applied.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    version: u32,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    profile: Profile,
    #[serde(default)]
    episode: toml::Table,
    #[serde(default)]
    fusion: FusionConfig,
    #[serde(default)]
    eval: EvalSection,
    #[serde(default)]
    train: TrainHyper,
    #[serde(default)]
    ablate: AblateSection,
    #[serde(default)]
    output: OutputSection,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            profile: Profile::default(),
            episode: toml::Table::new(),
            fusion: FusionConfig::default(),
            eval: EvalSection::default(),
            train: TrainHyper::default(),
            ablate: AblateSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// Values given on the command line. `None` keeps the file's value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
    pub out: Option<PathBuf>,
    pub force: bool,
    pub threads: Option<usize>,
    pub mode: Option<PoolingMode>,
    pub steps: Option<usize>,
    pub annotation: Option<AnnotationKind>,
    pub episodes: Option<usize>,
    pub runs: Option<usize>,
    pub net: Option<PathBuf>,
    pub iterations: Option<usize>,
    pub format: Option<EpisodeFormat>,
}

/// Fully resolved and validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    pub spec: SyntheticSpec,
    pub eval: EvalConfig,
    pub protocol: EvalProtocol,
    pub threads: usize,
    pub net: Option<PathBuf>,
    pub train: TrainHyper,
    pub ablate: AblateSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Read `path` (or start from defaults), apply `overrides`, validate.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                parse_file(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })?
            }
            None => ConfigFile::default(),
        };
        resolve(file, overrides)
    }

    pub fn from_toml(text: &str, overrides: &Overrides) -> Result<Self> {
        resolve(parse_file(text)?, overrides)
    }
}

fn parse_file(text: &str) -> Result<ConfigFile> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))?;
    if file.version != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "version: unsupported config version {} (expected {CONFIG_VERSION})",
            file.version
        )));
    }
    Ok(file)
}

fn episode_spec(profile: Profile, table: &toml::Table) -> Result<SyntheticSpec> {
    let base = toml::Value::try_from(profile.spec()).map_err(|e| CliError::Config(e.to_string()))?;
    let toml::Value::Table(mut merged) = base else {
        unreachable!("a struct serializes to a table")
    };
    for (key, value) in table {
        if key == "seed" {
            return Err(CliError::Config(
                "episode.seed: episode seeds derive from the top-level `seed`".into(),
            ));
        }
        merged.insert(key.clone(), value.clone());
    }
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("[episode] {}", e.message())))
}

fn resolve(mut file: ConfigFile, o: &Overrides) -> Result<RunConfig> {
    if let Some(v) = o.seed {
        file.seed = v;
    }
    if let Some(v) = o.profile {
        file.profile = v;
    }
    if let Some(v) = &o.out {
        file.output.dir = v.clone();
    }
    file.output.force |= o.force;
    if let Some(v) = o.format {
        file.output.format = v;
    }
    if let Some(v) = o.threads {
        file.eval.threads = v;
    }
    if let Some(v) = o.mode {
        file.fusion.mode = v;
        file.ablate.modes = vec![v];
    }
    if let Some(v) = o.steps {
        file.fusion.steps = v;
        file.ablate.steps = vec![v];
    }
    if let Some(v) = o.annotation {
        file.eval.annotation = v;
        file.ablate.annotations = vec![v];
    }
    if let Some(v) = o.episodes {
        file.eval.episodes = v;
    }
    if let Some(v) = o.runs {
        file.eval.runs = v;
    }
    if let Some(v) = &o.net {
        file.eval.net = Some(v.clone());
    }
    if let Some(v) = o.iterations {
        file.train.iterations = v;
    }

    let spec = episode_spec(file.profile, &file.episode)?;
    let eval = EvalConfig {
        fusion: file.fusion,
        sup_weight: file.eval.sup_weight,
        accumulation: file.eval.accumulation,
        support_prototypes: file.eval.support_prototypes,
        annotation: file.eval.annotation,
    };
    let cfg = RunConfig {
        seed: file.seed,
        profile: file.profile,
        spec,
        eval,
        protocol: EvalProtocol {
            runs: file.eval.runs,
            episodes: file.eval.episodes,
            seed: file.seed,
        },
        threads: file.eval.threads,
        net: file.eval.net,
        train: file.train,
        ablate: file.ablate,
        output: file.output,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        ClassBank::for_spec(&self.spec)?;
        self.eval.validate()?;
        self.train.validate()?;
        if self.protocol.runs == 0 {
            return Err(CliError::Config("eval.runs must be at least 1".into()));
        }
        if self.protocol.episodes == 0 {
            return Err(CliError::Config("eval.episodes must be at least 1".into()));
        }
        let a = &self.ablate;
        for (key, empty) in [
            ("ablate.modes", a.modes.is_empty()),
            ("ablate.steps", a.steps.is_empty()),
            ("ablate.annotations", a.annotations.is_empty()),
        ] {
            if empty {
                return Err(CliError::Config(format!("{key} must not be empty")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml(text, &Overrides::default())
    }

    #[test]
    fn minimal_file_is_the_default() {
        let c = cfg("version = 1").unwrap();
        assert_eq!(c.spec, SyntheticSpec::clean());
        assert_eq!(c.eval, EvalConfig::default());
        assert_eq!(c.protocol, EvalProtocol::default());
        assert_eq!(c, RunConfig::load(None, &Overrides::default()).unwrap());
    }

    #[test]
    fn episode_keys_refine_the_profile() {
        let c = cfg("version = 1\nprofile = \"distractor\"\n[episode]\nsigma = 0.1\n").unwrap();
        assert_eq!(
            c.spec,
            SyntheticSpec {
                sigma: 0.1,
                ..SyntheticSpec::distractor()
            }
        );
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, key) in [
            ("version = 1\nsed = 3", "sed"),
            ("version = 1\n[episode]\nsgima = 0.1", "sgima"),
            ("version = 1\n[fusion]\nstep = 3", "step"),
            ("version = 1\n[eval]\nepisode = 3", "episode"),
            ("version = 1\n[train]\nrate = 0.1", "rate"),
            ("version = 1\n[output]\npath = \"x\"", "path"),
            ("version = 1\n[plot]", "plot"),
        ] {
            let err = cfg(text).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
            assert!(matches!(cfg(text).unwrap_err(), CliError::Config(_)));
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(cfg("seed = 1").unwrap_err().to_string().contains("version"));
        assert!(cfg("version = 2").unwrap_err().to_string().contains("version"));
        assert!(cfg("version = 1\n[episode]\nseed = 4").unwrap_err().to_string().contains("episode.seed"));
        assert!(cfg("version = 1\n[episode]\nsigma = -1.0").unwrap_err().to_string().contains("sigma"));
        assert!(cfg("version = 1\n[fusion]\nmode = \"mp\"").unwrap_err().to_string().contains("mp"));
        assert!(cfg("version = 1\n[eval]\nruns = 0").unwrap_err().to_string().contains("eval.runs"));
        assert!(cfg("version = 1\n[ablate]\nsteps = []").unwrap_err().to_string().contains("ablate.steps"));
    }

    #[test]
    fn flags_win_over_the_file() {
        let o = Overrides {
            seed: Some(9),
            mode: Some(PoolingMode::Smp),
            steps: Some(1),
            annotation: Some(AnnotationKind::Bbox),
            episodes: Some(7),
            ..Overrides::default()
        };
        let c = RunConfig::from_toml("version = 1\nseed = 2\n[fusion]\nsteps = 5\n", &o).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.protocol.seed, 9);
        assert_eq!(c.eval.fusion.steps, 1);
        assert_eq!(c.eval.fusion.mode, PoolingMode::Smp);
        assert_eq!(c.eval.annotation, AnnotationKind::Bbox);
        assert_eq!(c.protocol.episodes, 7);
        assert_eq!(c.ablate.steps, vec![1]);
    }
}
