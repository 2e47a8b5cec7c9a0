//! Experiment config: a flat `key = value` file split into `[section]`s.
//!
//! Blank lines and `#` comments are ignored. Unknown sections or keys and
//! repeated keys are errors. Every key has a default, so an empty file is a
//! valid config describing the desk-scale synthetic experiment.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use monoguard::evaluation::{CertifyScope, GridSpec, DEFAULT_GRID_AXIS};
use monoguard::network::InitScheme;
use monoguard::training::Optimizer;
use monoguard::{
    Architecture, AttackConfig, ConstraintConfig, DistillConfig, HeadKind, SynthSpec, TrainConfig,
};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    /// Sample file and feature-space file, resolved against the config's directory.
    Files { data: PathBuf, space: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillSettings {
    pub temperature: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSettings {
    pub n1: Vec<f64>,
    pub n2: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifySettings {
    pub trials: usize,
    pub scope: CertifyScope,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub arch: Architecture,
    /// Includes the constraint config.
    pub train: TrainConfig,
    pub distill: DistillSettings,
    pub attack: AttackConfig,
    pub grid: GridSettings,
    pub certify: CertifySettings,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SynthSpec::default()),
            test_fraction: 0.2,
            split_seed: 1,
            arch: Architecture::desk_default(HeadKind::softmax(1.0)),
            train: TrainConfig::default(),
            distill: DistillSettings {
                temperature: 100.0,
                epochs: 10,
                optimizer: Optimizer::Adam,
                learning_rate: 1e-3,
            },
            attack: AttackConfig::default(),
            grid: GridSettings {
                n1: DEFAULT_GRID_AXIS.to_vec(),
                n2: DEFAULT_GRID_AXIS.to_vec(),
                seeds: vec![1, 2, 3],
            },
            certify: CertifySettings {
                trials: 10_000,
                scope: CertifyScope::AllFeatures,
                seed: 1,
            },
            out: None,
        }
    }
}

fn bad(line: usize, msg: impl fmt::Display) -> CliError {
    CliError::Config(format!("line {line}: {msg}"))
}

fn parse_num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| bad(line, format!("invalid value '{v}' for '{key}'")))
}

fn parse_token<T: FromStr<Err = String>>(line: usize, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|e: String| bad(line, e))
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>, CliError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|t| parse_num(line, key, t.trim())).collect()
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(line, format!("'{key}' must be true or false, got '{v}'"))),
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn head_token(h: HeadKind) -> &'static str {
    h.name()
}

fn certify_scope_token(s: CertifyScope) -> &'static str {
    match s {
        CertifyScope::AllFeatures => "all_features",
        CertifyScope::Manifest => "manifest",
    }
}

fn init_token(s: InitScheme) -> &'static str {
    s.name()
}

/// Values gathered from the file before they are assembled.
#[derive(Default)]
struct Raw {
    source: Option<(usize, String)>,
    data: Option<(usize, String)>,
    space: Option<(usize, String)>,
    head: Option<(usize, String)>,
    temperature: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut c = ExperimentConfig::default();
        let mut synth = SynthSpec::default();
        let mut raw = Raw::default();
        let mut section = String::new();
        let mut seen = std::collections::HashSet::new();

        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                const SECTIONS: [&str; 9] =
                    ["dataset", "network", "train", "constraint", "distill", "attack", "grid", "certify", "output"];
                if !SECTIONS.contains(&name) {
                    return Err(bad(n, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(n, "expected 'key = value'"))?;
            if section.is_empty() {
                return Err(bad(n, "key outside of any section"));
            }
            if !seen.insert(format!("{section}.{key}")) {
                return Err(bad(n, format!("duplicate key '{key}' in [{section}]")));
            }
            let t = &mut c.train;
            match (section.as_str(), key) {
                ("dataset", "source") => raw.source = Some((n, value.to_string())),
                ("dataset", "data") => raw.data = Some((n, value.to_string())),
                ("dataset", "space") => raw.space = Some((n, value.to_string())),
                ("dataset", "n_features") => synth.n_features = parse_num(n, key, value)?,
                ("dataset", "manifest_fraction") => synth.manifest_fraction = parse_num(n, key, value)?,
                ("dataset", "n_samples") => synth.n_samples = parse_num(n, key, value)?,
                ("dataset", "malware_fraction") => synth.malware_fraction = parse_num(n, key, value)?,
                ("dataset", "mean_density") => synth.mean_density = parse_num(n, key, value)?,
                ("dataset", "n_rules") => synth.n_rules = parse_num(n, key, value)?,
                ("dataset", "seed") => synth.seed = parse_num(n, key, value)?,
                ("dataset", "test_fraction") => c.test_fraction = parse_num(n, key, value)?,
                ("dataset", "split_seed") => c.split_seed = parse_num(n, key, value)?,
                ("network", "hidden") => c.arch.hidden = parse_list(n, key, value)?,
                ("network", "head") => raw.head = Some((n, value.to_string())),
                ("network", "temperature") => raw.temperature = Some(parse_num(n, key, value)?),
                ("train", "epochs") => t.epochs = parse_num(n, key, value)?,
                ("train", "batch_size") => t.batch_size = parse_num(n, key, value)?,
                ("train", "malware_ratio") => t.malware_ratio = parse_num(n, key, value)?,
                ("train", "learning_rate") => t.learning_rate = parse_num(n, key, value)?,
                ("train", "momentum") => t.momentum = parse_num(n, key, value)?,
                ("train", "optimizer") => t.optimizer = parse_token(n, value)?,
                ("train", "dropout_rate") => t.dropout_rate = parse_num(n, key, value)?,
                ("train", "seed") => t.seed = parse_num(n, key, value)?,
                ("constraint", "hard_scope") => t.constraint.hard_scope = parse_token(n, value)?,
                ("constraint", "n1") => t.constraint.n1 = parse_num(n, key, value)?,
                ("constraint", "n2") => t.constraint.n2 = parse_num(n, key, value)?,
                ("constraint", "placement") => t.constraint.placement = parse_token(n, value)?,
                ("constraint", "init") => t.constraint.init.scheme = parse_token(n, value)?,
                ("distill", "temperature") => c.distill.temperature = parse_num(n, key, value)?,
                ("distill", "epochs") => c.distill.epochs = parse_num(n, key, value)?,
                ("distill", "optimizer") => c.distill.optimizer = parse_token(n, value)?,
                ("distill", "learning_rate") => c.distill.learning_rate = parse_num(n, key, value)?,
                ("attack", "max_iterations") => c.attack.max_iterations = parse_num(n, key, value)?,
                ("attack", "require_negative_gradient") => {
                    c.attack.require_negative_gradient = parse_bool(n, key, value)?
                }
                ("grid", "n1") => c.grid.n1 = parse_list(n, key, value)?,
                ("grid", "n2") => c.grid.n2 = parse_list(n, key, value)?,
                ("grid", "seeds") => c.grid.seeds = parse_list(n, key, value)?,
                ("certify", "trials") => c.certify.trials = parse_num(n, key, value)?,
                ("certify", "scope") => {
                    c.certify.scope = match value {
                        "all_features" => CertifyScope::AllFeatures,
                        "manifest" => CertifyScope::Manifest,
                        _ => return Err(bad(n, format!("unknown certify scope '{value}'"))),
                    }
                }
                ("certify", "seed") => c.certify.seed = parse_num(n, key, value)?,
                ("output", "dir") => c.out = Some(base.join(value)),
                _ => return Err(bad(n, format!("unknown key '{key}' in [{section}]"))),
            }
        }

        c.train.constraint.init.seed = c.train.seed;
        c.arch.head = match raw.head.as_ref().map(|(n, v)| (*n, v.as_str())) {
            None | Some((_, "softmax_pair")) => HeadKind::softmax(raw.temperature.unwrap_or(1.0)),
            Some((n, "sigmoid_single")) => {
                if raw.temperature.is_some() {
                    return Err(bad(n, "temperature applies only to the softmax_pair head"));
                }
                HeadKind::SigmoidSingle
            }
            Some((n, other)) => return Err(bad(n, format!("unknown head '{other}'"))),
        };
        let source = raw.source.as_ref().map(|(n, v)| (*n, v.as_str())).unwrap_or((0, "synthetic"));
        c.dataset = match source {
            (_, "synthetic") => {
                if let Some((n, _)) = raw.data.as_ref().or(raw.space.as_ref()) {
                    return Err(bad(*n, "data/space paths conflict with source = synthetic"));
                }
                DatasetSource::Synthetic(synth)
            }
            (n, "files") => match (raw.data, raw.space) {
                (Some((_, d)), Some((_, s))) => DatasetSource::Files {
                    data: base.join(d),
                    space: base.join(s),
                },
                _ => return Err(bad(n, "source = files needs both 'data' and 'space'")),
            },
            (n, other) => return Err(bad(n, format!("unknown dataset source '{other}'"))),
        };
        c.validate()?;
        Ok(c)
    }

    /// Checks values and referenced paths.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: monoguard::Error| CliError::Config(e.to_string());
        match &self.dataset {
            DatasetSource::Synthetic(s) => s.validate().map_err(cfg)?,
            DatasetSource::Files { data, space } => {
                for p in [data, space] {
                    if !p.is_file() {
                        return Err(CliError::Config(format!("dataset file {} does not exist", p.display())));
                    }
                }
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CliError::Config(format!("test_fraction must be in (0,1), got {}", self.test_fraction)));
        }
        if self.arch.hidden.contains(&0) {
            return Err(CliError::Config("hidden layer widths must be positive".into()));
        }
        self.arch.head.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.distill_config().teacher_train.validate().map_err(cfg)?;
        HeadKind::softmax(self.distill.temperature).validate().map_err(cfg)?;
        self.attack.validate().map_err(cfg)?;
        self.grid_spec().validate().map_err(cfg)?;
        Ok(())
    }

    /// Replaces every seed in the config.
    pub fn override_seed(&mut self, seed: u64) {
        if let DatasetSource::Synthetic(s) = &mut self.dataset {
            s.seed = seed;
        }
        self.split_seed = seed;
        self.train = self.train.clone().with_seed(seed);
        self.grid.seeds = vec![seed];
        self.certify.seed = seed;
    }

    pub fn distill_config(&self) -> DistillConfig {
        let mut t = self.train.clone();
        t.epochs = self.distill.epochs;
        t.optimizer = self.distill.optimizer;
        t.learning_rate = self.distill.learning_rate;
        t.constraint = ConstraintConfig::unconstrained(self.train.seed);
        DistillConfig {
            temperature: self.distill.temperature,
            teacher_train: t.clone(),
            student_train: t,
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            n1_values: self.grid.n1.clone(),
            n2_values: self.grid.n2.clone(),
            base_train: self.train.clone(),
            seeds: self.grid.seeds.clone(),
        }
    }

    /// Canonical text with every key spelled out. Parses back to `self`
    /// except for the output directory, which is left out so that runs in
    /// different directories produce identical copies.
    pub fn to_text(&self) -> String {
        let mut s = String::from("[dataset]\n");
        match &self.dataset {
            DatasetSource::Synthetic(sp) => {
                let _ = writeln!(s, "source = synthetic");
                let _ = writeln!(s, "n_features = {}", sp.n_features);
                let _ = writeln!(s, "manifest_fraction = {}", sp.manifest_fraction);
                let _ = writeln!(s, "n_samples = {}", sp.n_samples);
                let _ = writeln!(s, "malware_fraction = {}", sp.malware_fraction);
                let _ = writeln!(s, "mean_density = {}", sp.mean_density);
                let _ = writeln!(s, "n_rules = {}", sp.n_rules);
                let _ = writeln!(s, "seed = {}", sp.seed);
            }
            DatasetSource::Files { data, space } => {
                let _ = writeln!(s, "source = files");
                let _ = writeln!(s, "data = {}", data.display());
                let _ = writeln!(s, "space = {}", space.display());
            }
        }
        let _ = writeln!(s, "test_fraction = {}", self.test_fraction);
        let _ = writeln!(s, "split_seed = {}", self.split_seed);

        s.push_str("\n[network]\n");
        let _ = writeln!(s, "hidden = {}", join(&self.arch.hidden));
        let _ = writeln!(s, "head = {}", head_token(self.arch.head));
        if let HeadKind::SoftmaxPair { temperature } = self.arch.head {
            let _ = writeln!(s, "temperature = {temperature}");
        }

        let t = &self.train;
        s.push_str("\n[train]\n");
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "malware_ratio = {}", t.malware_ratio);
        let _ = writeln!(s, "learning_rate = {}", t.learning_rate);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "optimizer = {}", t.optimizer.as_str());
        let _ = writeln!(s, "dropout_rate = {}", t.dropout_rate);
        let _ = writeln!(s, "seed = {}", t.seed);

        let cc = &t.constraint;
        s.push_str("\n[constraint]\n");
        let _ = writeln!(s, "hard_scope = {}", cc.hard_scope);
        let _ = writeln!(s, "n1 = {}", cc.n1);
        let _ = writeln!(s, "n2 = {}", cc.n2);
        let _ = writeln!(s, "placement = {}", cc.placement);
        let _ = writeln!(s, "init = {}", init_token(cc.init.scheme));

        let d = &self.distill;
        s.push_str("\n[distill]\n");
        let _ = writeln!(s, "temperature = {}", d.temperature);
        let _ = writeln!(s, "epochs = {}", d.epochs);
        let _ = writeln!(s, "optimizer = {}", d.optimizer.as_str());
        let _ = writeln!(s, "learning_rate = {}", d.learning_rate);

        s.push_str("\n[attack]\n");
        let _ = writeln!(s, "max_iterations = {}", self.attack.max_iterations);
        let _ = writeln!(s, "require_negative_gradient = {}", self.attack.require_negative_gradient);

        s.push_str("\n[grid]\n");
        let _ = writeln!(s, "n1 = {}", join(&self.grid.n1));
        let _ = writeln!(s, "n2 = {}", join(&self.grid.n2));
        let _ = writeln!(s, "seeds = {}", join(&self.grid.seeds));

        s.push_str("\n[certify]\n");
        let _ = writeln!(s, "trials = {}", self.certify.trials);
        let _ = writeln!(s, "scope = {}", certify_scope_token(self.certify.scope));
        let _ = writeln!(s, "seed = {}", self.certify.seed);

        s
    }
}
