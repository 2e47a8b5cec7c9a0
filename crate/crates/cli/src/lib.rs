//! Command implementations behind the `monoguard` executable.
//!
//! Every command writes its artifacts into a staging directory next to the
//! output directory and moves them into place only after the whole command
//! succeeded, so a failed run leaves no partial files behind.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use monoguard::attack::AttackReport;
use monoguard::dataset::generate_synthetic;
use monoguard::network::{deserialize, serialize};
use monoguard::{
    certify_monotone, evaluate, grid_search, misclassification_rate, train, train_distilled, transfer_rate, Dataset,
    FeatureSpace, ModelParams,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::ExperimentConfig;
use config::DatasetSource;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("runtime: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// `error: <kind>: <message>` on a single line.
    pub fn line(&self) -> String {
        format!("error: {self}").replace(['\n', '\r'], " ")
    }
}

impl From<monoguard::Error> for CliError {
    fn from(e: monoguard::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const RESOLVED_CONFIG: &str = "resolved.cfg";

/// Files written to a sibling staging directory, published together by [`Staging::commit`].
pub struct Staging {
    out: PathBuf,
    dir: PathBuf,
    files: Vec<String>,
    committed: bool,
}

impl Staging {
    pub fn new(out: &Path) -> Result<Self> {
        let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let dir = parent.join(format!(".{name}.staging-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Self {
            out: out.to_path_buf(),
            dir,
            files: Vec::new(),
            committed: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Registers a file that was written directly to [`Staging::path`].
    pub fn adopt(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(&self.out)?;
        let mut published = Vec::new();
        for f in &self.files {
            let dest = self.out.join(f);
            fs::rename(self.dir.join(f), &dest)?;
            published.push(dest);
        }
        self.committed = true;
        let _ = fs::remove_dir_all(&self.dir);
        Ok(published)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

/// Loads or generates the full corpus described by the config.
pub fn load_dataset(c: &ExperimentConfig) -> Result<Dataset> {
    match &c.dataset {
        DatasetSource::Synthetic(spec) => Ok(generate_synthetic(spec)?),
        DatasetSource::Files { data, space } => Ok(Dataset::load(data, space)?),
    }
}

/// The `(train, test)` split every command shares.
pub fn split_dataset(c: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    Ok(load_dataset(c)?.split(c.test_fraction, c.split_seed)?)
}

pub fn load_model(path: &Path, space: &FeatureSpace) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read model {}: {e}", path.display())))?;
    let m = deserialize(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if m.feature_space_id() != space.checksum() {
        return Err(CliError::Runtime(format!(
            "model {} was trained on a different feature space",
            path.display()
        )));
    }
    Ok(m)
}

fn out_dir(c: &ExperimentConfig) -> Result<PathBuf> {
    c.out.clone().ok_or_else(|| CliError::Usage("no output directory (pass --out or set [output] dir)".into()))
}

fn begin(c: &ExperimentConfig) -> Result<Staging> {
    let mut st = Staging::new(&out_dir(c)?)?;
    st.write(RESOLVED_CONFIG, c.to_text())?;
    Ok(st)
}

/// Writes `data.txt` and `space.txt`.
pub fn cmd_gen_data(c: &ExperimentConfig) -> Result<String> {
    let d = load_dataset(c)?;
    let mut st = begin(c)?;
    d.save(st.path("data.txt"), st.path("space.txt"))?;
    st.adopt("data.txt");
    st.adopt("space.txt");
    st.commit()?;
    Ok(format!(
        "samples {} malware {} features {} manifest {} density {:.3}",
        d.len(),
        d.count(monoguard::Label::Malware),
        d.space().n_features(),
        d.space().n_manifest(),
        d.mean_density()
    ))
}

/// Writes `model.txt` and `train_log.txt`.
pub fn cmd_train(c: &ExperimentConfig) -> Result<String> {
    let (tr, _) = split_dataset(c)?;
    let (model, log) = train(&tr, &c.arch, &c.train)?;
    let mut st = begin(c)?;
    st.write("model.txt", serialize(&model))?;
    st.write("train_log.txt", log.to_string())?;
    st.commit()?;
    let last = log.epochs.last();
    Ok(format!(
        "epochs {} loss {:.6} negmass {:.6}",
        log.epochs.len(),
        last.map_or(f64::NAN, |r| r.loss),
        monoguard::negative_mass(&model)
    ))
}

/// Writes `teacher.txt`, `student.txt` and both training logs.
pub fn cmd_distill(c: &ExperimentConfig) -> Result<String> {
    let (tr, _) = split_dataset(c)?;
    let d = train_distilled(&tr, &c.arch, &c.distill_config())?;
    let mut st = begin(c)?;
    st.write("teacher.txt", serialize(&d.teacher))?;
    st.write("student.txt", serialize(&d.student))?;
    st.write("teacher_log.txt", d.teacher_log.to_string())?;
    st.write("student_log.txt", d.student_log.to_string())?;
    st.commit()?;
    Ok(format!("temperature {}", c.distill.temperature))
}

/// Writes `attack_report.txt` and `metrics.txt` (with `mr`) for the test split.
pub fn cmd_attack(c: &ExperimentConfig, model: &Path) -> Result<String> {
    let (_, te) = split_dataset(c)?;
    let m = load_model(model, te.space())?;
    let summary = misclassification_rate(&m, te.samples(), te.space(), &c.attack)?;
    let mut metrics = evaluate(&m, &te)?;
    metrics.mr = Some(summary.rate);
    let mut st = begin(c)?;
    st.write("attack_report.txt", AttackReport(&summary).to_string())?;
    st.write("metrics.txt", metrics.to_string())?;
    st.commit()?;
    let warn = if summary.empty { " (no detected malware)" } else { "" };
    Ok(format!(
        "mr {:.6} detected {} success {}{warn}",
        summary.rate, summary.n_detected, summary.n_success
    ))
}

/// Writes `metrics.txt` for the test split.
pub fn cmd_eval(c: &ExperimentConfig, model: &Path) -> Result<String> {
    let (_, te) = split_dataset(c)?;
    let m = load_model(model, te.space())?;
    let metrics = evaluate(&m, &te)?;
    let mut st = begin(c)?;
    st.write("metrics.txt", metrics.to_string())?;
    st.commit()?;
    Ok(metrics.to_string().trim_end().replace('\n', " "))
}

/// Writes one heatmap CSV per metric.
pub fn cmd_grid(c: &ExperimentConfig) -> Result<String> {
    let (tr, te) = split_dataset(c)?;
    let report = grid_search(&tr, &te, &c.arch, &c.grid_spec(), &c.attack)?;
    let mut st = begin(c)?;
    for metric in monoguard::evaluation::GridMetric::ALL {
        st.write(metric.file_name(), report.to_csv(metric))?;
    }
    st.commit()?;
    let failed = report.cells.iter().flat_map(|cell| &cell.runs).filter(|r| r.is_err()).count();
    Ok(format!(
        "cells {} runs {} failed {failed}",
        report.cells.len(),
        report.cells.len() * report.seeds.len()
    ))
}

/// Writes `certificate.txt`; trials draw from the test split.
pub fn cmd_certify(c: &ExperimentConfig, model: &Path) -> Result<String> {
    let (_, te) = split_dataset(c)?;
    let m = load_model(model, te.space())?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.certify.seed);
    let report = certify_monotone(&m, te.space(), te.samples(), c.certify.scope, c.certify.trials, &mut rng)?;
    let mut st = begin(c)?;
    st.write("certificate.txt", report.to_string())?;
    st.commit()?;
    Ok(report.to_string().lines().take(2).collect::<Vec<_>>().join(" "))
}

/// Writes `transfer.txt`: perturbations crafted on `source`, replayed on `target`.
pub fn cmd_transfer(c: &ExperimentConfig, source: &Path, target: &Path) -> Result<String> {
    let (_, te) = split_dataset(c)?;
    let src = load_model(source, te.space())?;
    let tgt = load_model(target, te.space())?;
    let t = transfer_rate(&src, &tgt, te.samples(), te.space(), &c.attack)?;
    let direct = misclassification_rate(&tgt, te.samples(), te.space(), &c.attack)?;
    let text = format!(
        "transfer_rate {:.6} source_successes {} transferred {}\nsource_mr {:.6}\ntarget_direct_mr {:.6}\n",
        t.rate, t.n_source_success, t.n_transferred, t.source.rate, direct.rate
    );
    let mut st = begin(c)?;
    st.write("transfer.txt", &text)?;
    st.commit()?;
    Ok(text.trim_end().replace('\n', " "))
}
