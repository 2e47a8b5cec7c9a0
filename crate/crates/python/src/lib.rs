//! Python bindings: datasets, training, the enable-only attack and certificates.
//!
//! Samples cross the boundary as lists of active feature indices; labels as
//! the strings `"benign"` and `"malware"`.

use monoguard::attack::AttackConfig;
use monoguard::network::{self, deserialize, serialize};
use monoguard::{
    certify_monotone, constraints, evaluate, fallback_predict, generate_synthetic, misclassification_rate,
    transfer_rate, Architecture, CertifyScope, ConstraintConfig, DistillConfig, HardScope, HeadKind, InitMode,
    InitScheme, Label, Placement, Sample, SynthSpec, TrainConfig,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(err)
}

fn sample(indices: Vec<usize>, n_features: usize) -> PyResult<Sample> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= n_features) {
        return Err(err(format!("feature {bad} out of range for {n_features} features")));
    }
    Ok(Sample::new(indices, Label::Benign))
}

#[pyclass(module = "monoguard_py")]
#[derive(Clone)]
struct Dataset {
    inner: monoguard::Dataset,
}

#[pymethods]
impl Dataset {
    /// Planted-rule synthetic corpus; defaults give the 5,000-feature, 20,000-sample shape.
    #[staticmethod]
    #[pyo3(signature = (n_features=5000, n_samples=20000, mean_density=48.0, malware_fraction=0.08, manifest_fraction=0.55, n_rules=40, seed=1))]
    fn synthetic(
        n_features: usize,
        n_samples: usize,
        mean_density: f64,
        malware_fraction: f64,
        manifest_fraction: f64,
        n_rules: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SynthSpec {
            n_features,
            manifest_fraction,
            n_samples,
            malware_fraction,
            mean_density,
            n_rules,
            seed,
        };
        Ok(Self { inner: generate_synthetic(&spec).map_err(err)? })
    }

    #[staticmethod]
    fn load(data: &str, space: &str) -> PyResult<Self> {
        Ok(Self { inner: monoguard::Dataset::load(data, space).map_err(|e| PyIOError::new_err(e.to_string()))? })
    }

    fn save(&self, data: &str, space: &str) -> PyResult<()> {
        self.inner.save(data, space).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// Stratified `(train, test)` split.
    #[pyo3(signature = (test_fraction=0.2, seed=1))]
    fn split(&self, test_fraction: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let (tr, te) = self.inner.split(test_fraction, seed).map_err(err)?;
        Ok((Self { inner: tr }, Self { inner: te }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.space().n_features()
    }

    #[getter]
    fn n_malware(&self) -> usize {
        self.inner.count(Label::Malware)
    }

    #[getter]
    fn mean_density(&self) -> f64 {
        self.inner.mean_density()
    }

    #[getter]
    fn manifest(&self) -> Vec<usize> {
        self.inner.space().manifest_indices()
    }

    /// `(indices, label)` of sample `i`.
    fn sample(&self, i: usize) -> PyResult<(Vec<usize>, &'static str)> {
        let s = self.inner.samples().get(i).ok_or_else(|| err(format!("sample {i} out of range")))?;
        Ok((s.indices().to_vec(), s.label().as_str()))
    }
}

#[pyclass(module = "monoguard_py")]
#[derive(Clone)]
struct Model {
    inner: monoguard::ModelParams,
}

fn arch(hidden: Vec<usize>, head: &str, temperature: f64) -> PyResult<Architecture> {
    let head = match head {
        "sigmoid" | "sigmoid_single" => HeadKind::SigmoidSingle,
        "softmax" | "softmax_pair" => HeadKind::softmax(temperature),
        other => return Err(err(format!("unknown head '{other}'"))),
    };
    Ok(Architecture::new(hidden, head))
}

#[allow(clippy::too_many_arguments)]
fn train_config(
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    optimizer: &str,
    n1: f64,
    n2: f64,
    placement: &str,
    hard_scope: &str,
    init: &str,
    seed: u64,
) -> PyResult<TrainConfig> {
    let mut cfg = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        optimizer: parse(optimizer)?,
        constraint: ConstraintConfig {
            hard_scope: parse::<HardScope>(hard_scope)?,
            n1,
            n2,
            placement: parse::<Placement>(placement)?,
            init: InitMode::new(parse::<InitScheme>(init)?, seed),
        },
        ..TrainConfig::default()
    };
    cfg.seed = seed;
    Ok(cfg)
}

#[pymethods]
impl Model {
    /// Trains on `data`. `hard_scope` is `none`, `all_weights` or `manifest_monotone`.
    #[staticmethod]
    #[pyo3(signature = (
        data, hidden=vec![200, 200], head="softmax", temperature=1.0, epochs=10, batch_size=1000,
        learning_rate=0.01, optimizer="sgd_momentum", n1=0.0, n2=0.0, placement="weights",
        hard_scope="none", init="glorot_normal", seed=1
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        data: &Dataset,
        hidden: Vec<usize>,
        head: &str,
        temperature: f64,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        optimizer: &str,
        n1: f64,
        n2: f64,
        placement: &str,
        hard_scope: &str,
        init: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let a = arch(hidden, head, temperature)?;
        let cfg = train_config(epochs, batch_size, learning_rate, optimizer, n1, n2, placement, hard_scope, init, seed)?;
        let d = data.inner.clone();
        let (m, _) = py.allow_threads(|| monoguard::train(&d, &a, &cfg)).map_err(err)?;
        Ok(Self { inner: m })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner: deserialize(&bytes).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        std::fs::write(path, serialize(&self.inner)).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn p_malware(&self, indices: Vec<usize>) -> PyResult<f64> {
        Ok(network::p_malware(&self.inner, &sample(indices, self.inner.n_features())?))
    }

    fn predict(&self, indices: Vec<usize>) -> PyResult<&'static str> {
        Ok(network::predict(&self.inner, &sample(indices, self.inner.n_features())?).as_str())
    }

    fn negative_mass(&self) -> f64 {
        constraints::negative_mass(&self.inner)
    }

    /// Copy with every weight in scope clamped at zero.
    #[pyo3(signature = (scope="all_weights", data=None))]
    fn project_nonnegative(&self, scope: &str, data: Option<&Dataset>) -> PyResult<Self> {
        let space = data.map(|d| d.inner.space());
        Ok(Self { inner: constraints::project_nonnegative(&self.inner, parse(scope)?, space).map_err(err)? })
    }

    /// `{"fpr", "fnr", "accuracy"}` on `data`.
    fn evaluate<'py>(&self, py: Python<'py>, data: &Dataset) -> PyResult<Bound<'py, PyDict>> {
        let m = evaluate(&self.inner, &data.inner).map_err(err)?;
        let d = PyDict::new_bound(py);
        d.set_item("fpr", m.fpr)?;
        d.set_item("fnr", m.fnr)?;
        d.set_item("accuracy", m.accuracy)?;
        Ok(d)
    }

    /// Greedy enable-only attack on every detected malware sample in `data`.
    #[pyo3(signature = (data, max_iterations=20))]
    fn attack<'py>(&self, py: Python<'py>, data: &Dataset, max_iterations: usize) -> PyResult<Bound<'py, PyDict>> {
        let cfg = AttackConfig { max_iterations, ..AttackConfig::default() };
        let (m, d) = (&self.inner, &data.inner);
        let s = py
            .allow_threads(|| misclassification_rate(m, d.samples(), d.space(), &cfg))
            .map_err(err)?;
        let out = PyDict::new_bound(py);
        out.set_item("mr", s.rate)?;
        out.set_item("detected", s.n_detected)?;
        out.set_item("success", s.n_success)?;
        let added: Vec<(usize, Vec<usize>)> =
            s.results.iter().map(|(i, r)| (*i, r.enabled_features.clone())).collect();
        out.set_item("added", added)?;
        Ok(out)
    }

    /// Structural and sampled behavioral monotonicity check over `data`.
    #[pyo3(signature = (data, trials=10000, scope="all_features", seed=1))]
    fn certify<'py>(
        &self,
        py: Python<'py>,
        data: &Dataset,
        trials: usize,
        scope: &str,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let scope = match scope {
            "all_features" => CertifyScope::AllFeatures,
            "manifest" => CertifyScope::Manifest,
            other => return Err(err(format!("unknown certify scope '{other}'"))),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = certify_monotone(&self.inner, data.inner.space(), data.inner.samples(), scope, trials, &mut rng)
            .map_err(err)?;
        let out = PyDict::new_bound(py);
        out.set_item("structural", r.structural)?;
        out.set_item("behavioral", r.behavioral)?;
        out.set_item("trials", r.trials)?;
        out.set_item("counterexamples", r.counterexamples.len())?;
        Ok(out)
    }
}

/// Trains a teacher, then a student on its soft labels at `temperature`; returns `(teacher, student)`.
#[pyfunction]
#[pyo3(signature = (data, temperature=100.0, hidden=vec![200, 200], epochs=10, learning_rate=1e-3, optimizer="adam", seed=1))]
fn distill(
    py: Python<'_>,
    data: &Dataset,
    temperature: f64,
    hidden: Vec<usize>,
    epochs: usize,
    learning_rate: f64,
    optimizer: &str,
    seed: u64,
) -> PyResult<(Model, Model)> {
    let cfg = train_config(epochs, 1000, learning_rate, optimizer, 0.0, 0.0, "weights", "none", "glorot_normal", seed)?;
    let dc = DistillConfig {
        temperature,
        teacher_train: cfg.clone(),
        student_train: cfg,
    };
    let a = Architecture::new(hidden, HeadKind::softmax(1.0));
    let d = data.inner.clone();
    let out = py.allow_threads(|| monoguard::train_distilled(&d, &a, &dc)).map_err(err)?;
    Ok((Model { inner: out.teacher }, Model { inner: out.student }))
}

/// Fraction of perturbations that succeed on `source` and also evade `target`.
#[pyfunction]
#[pyo3(signature = (source, target, data, max_iterations=20))]
fn transfer(py: Python<'_>, source: &Model, target: &Model, data: &Dataset, max_iterations: usize) -> PyResult<f64> {
    let cfg = AttackConfig { max_iterations, ..AttackConfig::default() };
    let d = &data.inner;
    let t = py
        .allow_threads(|| transfer_rate(&source.inner, &target.inner, d.samples(), d.space(), &cfg))
        .map_err(err)?;
    Ok(t.rate)
}

/// Restricted model's verdict, deferring to `unrestricted` when it says benign.
#[pyfunction]
fn fallback(restricted: &Model, unrestricted: &Model, indices: Vec<usize>) -> PyResult<&'static str> {
    let x = sample(indices, restricted.inner.n_features())?;
    Ok(fallback_predict(&restricted.inner, &unrestricted.inner, &x).map_err(err)?.as_str())
}

#[pyfunction]
fn n1(x: f64) -> f64 {
    constraints::n1(x)
}

#[pyfunction]
fn n2(x: f64) -> f64 {
    constraints::n2(x)
}

#[pymodule]
fn monoguard_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(transfer, m)?)?;
    m.add_function(wrap_pyfunction!(fallback, m)?)?;
    m.add_function(wrap_pyfunction!(n1, m)?)?;
    m.add_function(wrap_pyfunction!(n2, m)?)?;
    Ok(())
}
