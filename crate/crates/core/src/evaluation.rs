//! Classification metrics, the N1/N2 grid search, monotonicity certificates
//! and the fallback composition of a restricted and an unrestricted model.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::attack::{misclassification_rate, AttackConfig};
use crate::constraints::{negative_mass, HardScope, Placement};
use crate::dataset::{Dataset, FeatureSpace, Label, Sample};
use crate::error::{param, Result};
use crate::network::{p_malware, predict, Architecture, HeadKind, ModelParams};
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Benign classified malware over all benign.
    pub fpr: f64,
    /// Malware classified benign over all malware.
    pub fnr: f64,
    pub accuracy: f64,
    pub mr: Option<f64>,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fpr {:.6}", self.fpr)?;
        writeln!(f, "fnr {:.6}", self.fnr)?;
        writeln!(f, "accuracy {:.6}", self.accuracy)?;
        if let Some(mr) = self.mr {
            writeln!(f, "mr {mr:.6}")?;
        }
        Ok(())
    }
}

/// Metrics from arbitrary `(truth, prediction)` pairs. A rate whose denominator is empty is 0.
pub fn metrics_from_predictions(pairs: impl IntoIterator<Item = (Label, Label)>) -> Result<Metrics> {
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (truth, pred) in pairs {
        match (truth, pred) {
            (Label::Malware, Label::Malware) => tp += 1,
            (Label::Benign, Label::Benign) => tn += 1,
            (Label::Benign, Label::Malware) => fp += 1,
            (Label::Malware, Label::Benign) => fn_ += 1,
        }
    }
    let total = tp + tn + fp + fn_;
    if total == 0 {
        return param("cannot evaluate on an empty test set");
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Metrics {
        fpr: ratio(fp, fp + tn),
        fnr: ratio(fn_, fn_ + tp),
        accuracy: ratio(tp + tn, total),
        mr: None,
    })
}

/// FPR, FNR and accuracy at temperature 1.
pub fn evaluate(m: &ModelParams, test: &Dataset) -> Result<Metrics> {
    let preds: Vec<(Label, Label)> = test.samples().par_iter().map(|s| (s.label(), predict(m, s))).collect();
    metrics_from_predictions(preds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub n1_values: Vec<f64>,
    pub n2_values: Vec<f64>,
    pub base_train: TrainConfig,
    pub seeds: Vec<u64>,
}

/// Log-spaced axis including 0.67.
pub const DEFAULT_GRID_AXIS: [f64; 7] = [0.0, 0.1, 0.22, 0.46, 0.67, 1.0, 2.2];

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n1_values.is_empty() || self.n2_values.is_empty() || self.seeds.is_empty() {
            return param("grid axes and seed list must be non-empty");
        }
        if self.n1_values.iter().chain(&self.n2_values).any(|v| v.is_nan() || *v < 0.0) {
            return param("grid coefficients must be >= 0");
        }
        Ok(())
    }

    /// Training config of one run: base config, weight placement, given coefficients and seed.
    pub fn run_config(&self, n1: f64, n2: f64, seed: u64) -> TrainConfig {
        let mut cfg = self.base_train.clone().with_seed(seed);
        cfg.constraint.hard_scope = HardScope::None;
        cfg.constraint.placement = Placement::Weights;
        cfg.constraint.n1 = n1;
        cfg.constraint.n2 = n2;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOutcome {
    pub metrics: Metrics,
    pub mr: f64,
    pub negative_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub n1: f64,
    pub n2: f64,
    /// One entry per seed, in `GridSpec::seeds` order; failures keep their message.
    pub runs: Vec<std::result::Result<RunOutcome, String>>,
}

impl GridCell {
    fn mean_of(&self, f: impl Fn(&RunOutcome) -> f64) -> Option<f64> {
        let ok: Vec<f64> = self.runs.iter().filter_map(|r| r.as_ref().ok()).map(f).collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }

    pub fn mean_mr(&self) -> Option<f64> {
        self.mean_of(|r| r.mr)
    }

    pub fn mean_fnr(&self) -> Option<f64> {
        self.mean_of(|r| r.metrics.fnr)
    }

    pub fn mean_fpr(&self) -> Option<f64> {
        self.mean_of(|r| r.metrics.fpr)
    }

    pub fn mean_negative_mass(&self) -> Option<f64> {
        self.mean_of(|r| r.negative_mass)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub n1_values: Vec<f64>,
    pub n2_values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Row-major: `cells[i * n2_values.len() + j]` is `(n1_values[i], n2_values[j])`.
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMetric {
    Mr,
    Fnr,
    Fpr,
    NegativeMass,
}

impl GridMetric {
    pub const ALL: [GridMetric; 4] = [GridMetric::Mr, GridMetric::Fnr, GridMetric::Fpr, GridMetric::NegativeMass];

    pub fn file_name(self) -> &'static str {
        match self {
            GridMetric::Mr => "grid_mr.csv",
            GridMetric::Fnr => "grid_fnr.csv",
            GridMetric::Fpr => "grid_fpr.csv",
            GridMetric::NegativeMass => "grid_negmass.csv",
        }
    }

    fn of(self, r: &RunOutcome) -> f64 {
        match self {
            GridMetric::Mr => r.mr,
            GridMetric::Fnr => r.metrics.fnr,
            GridMetric::Fpr => r.metrics.fpr,
            GridMetric::NegativeMass => r.negative_mass,
        }
    }
}

impl GridReport {
    pub fn cell(&self, i: usize, j: usize) -> &GridCell {
        &self.cells[i * self.n2_values.len() + j]
    }

    /// Heatmap CSV: rows are n1 values, the first columns are per-cell means
    /// over seeds, followed by per-seed columns `<n2>@seed<s>`.
    pub fn to_csv(&self, metric: GridMetric) -> String {
        let mut out = String::from("n1\\n2");
        for v in &self.n2_values {
            out.push_str(&format!(",{v}"));
        }
        for s in &self.seeds {
            for v in &self.n2_values {
                out.push_str(&format!(",{v}@seed{s}"));
            }
        }
        out.push('\n');
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        for (i, n1) in self.n1_values.iter().enumerate() {
            out.push_str(&n1.to_string());
            for j in 0..self.n2_values.len() {
                let c = self.cell(i, j);
                out.push(',');
                out.push_str(&fmt_opt(c.mean_of(|r| metric.of(r))));
            }
            for k in 0..self.seeds.len() {
                for j in 0..self.n2_values.len() {
                    let r = self.cell(i, j).runs[k].as_ref().ok().map(|r| metric.of(r));
                    out.push(',');
                    out.push_str(&fmt_opt(r));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        for metric in GridMetric::ALL {
            fs::write(dir.join(metric.file_name()), self.to_csv(metric))?;
        }
        Ok(())
    }
}

/// Trains, evaluates and attacks one configuration.
pub fn run_once(
    train_set: &Dataset,
    test_set: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    attack_cfg: &AttackConfig,
) -> Result<(ModelParams, RunOutcome)> {
    let (model, _) = train(train_set, arch, cfg)?;
    let mut metrics = evaluate(&model, test_set)?;
    let attack = misclassification_rate(&model, test_set.samples(), test_set.space(), attack_cfg)?;
    metrics.mr = Some(attack.rate);
    let outcome = RunOutcome {
        metrics,
        mr: attack.rate,
        negative_mass: negative_mass(&model),
    };
    Ok((model, outcome))
}

/// Runs every `(n1, n2, seed)` combination with the weight placement.
///
/// Runs execute in parallel; results are assembled in axis order so the
/// report is independent of scheduling.
pub fn grid_search(
    train_set: &Dataset,
    test_set: &Dataset,
    arch: &Architecture,
    spec: &GridSpec,
    attack_cfg: &AttackConfig,
) -> Result<GridReport> {
    spec.validate()?;
    let jobs: Vec<(f64, f64, u64)> = spec
        .n1_values
        .iter()
        .flat_map(|&a| spec.n2_values.iter().flat_map(move |&b| spec.seeds.iter().map(move |&s| (a, b, s))))
        .collect();
    let outcomes: Vec<std::result::Result<RunOutcome, String>> = jobs
        .par_iter()
        .map(|&(n1, n2, seed)| {
            let cfg = spec.run_config(n1, n2, seed);
            run_once(train_set, test_set, arch, &cfg, attack_cfg)
                .map(|(_, o)| o)
                .map_err(|e| e.to_string())
        })
        .collect();
    let per_cell = spec.seeds.len();
    let cells = outcomes
        .chunks(per_cell)
        .zip(jobs.chunks(per_cell))
        .map(|(runs, js)| GridCell {
            n1: js[0].0,
            n2: js[0].1,
            runs: runs.to_vec(),
        })
        .collect();
    Ok(GridReport {
        n1_values: spec.n1_values.clone(),
        n2_values: spec.n2_values.clone(),
        seeds: spec.seeds.clone(),
        cells,
    })
}

/// Which inputs a certificate covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertifyScope {
    /// Every feature; structural check covers all weights.
    AllFeatures,
    /// Manifest features only; code-feature first-layer rows may be negative.
    Manifest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub sample: usize,
    pub feature: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub structural: bool,
    pub behavioral: bool,
    pub trials: usize,
    pub counterexamples: Vec<Counterexample>,
}

impl CertificateReport {
    pub fn structural_only(&self) -> bool {
        self.trials == 0
    }

    pub fn passed(&self) -> bool {
        self.structural && self.behavioral
    }
}

impl fmt::Display for CertificateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pf = |b: bool| if b { "PASS" } else { "FAIL" };
        writeln!(f, "structural {}", pf(self.structural))?;
        write!(f, "behavioral {} trials {}", pf(self.behavioral), self.trials)?;
        if self.structural_only() {
            write!(f, " structural-only")?;
        }
        writeln!(f)?;
        for c in &self.counterexamples {
            writeln!(
                f,
                "counterexample sample {} feature {} before {:.17e} after {:.17e}",
                c.sample, c.feature, c.before, c.after
            )?;
        }
        Ok(())
    }
}

/// Behavioral tolerance for the flip check.
pub const MONOTONE_TOLERANCE: f64 = 1e-9;

/// Structural sign check plus randomized flip trials.
///
/// The structural check is exact for the sigmoid head: non-negative weights
/// in scope make `p_malware` non-decreasing in every in-scope input. Softmax
/// heads never pass it. Each behavioral trial draws a sample and one of its
/// disabled in-scope features, switches it on, and requires `p_malware` not
/// to drop by more than [`MONOTONE_TOLERANCE`].
pub fn certify_monotone<R: Rng + ?Sized>(
    m: &ModelParams,
    space: &FeatureSpace,
    samples: &[Sample],
    scope: CertifyScope,
    n_trials: usize,
    rng: &mut R,
) -> Result<CertificateReport> {
    if m.n_features() != space.n_features() {
        return param("model and feature space widths differ");
    }
    let hard = match scope {
        CertifyScope::AllFeatures => HardScope::AllWeights,
        CertifyScope::Manifest => HardScope::ManifestMonotone,
    };
    let structural = m.head() == HeadKind::SigmoidSingle && crate::constraints::satisfies_scope(m, hard, Some(space));

    let in_scope: Vec<usize> = match scope {
        CertifyScope::AllFeatures => (0..space.n_features()).collect(),
        CertifyScope::Manifest => space.manifest_indices(),
    };
    if n_trials > 0 && samples.is_empty() {
        return param("behavioral trials need at least one sample");
    }
    let mut counterexamples = Vec::new();
    let mut trials = 0;
    for _ in 0..n_trials {
        let si = rng.gen_range(0..samples.len());
        let s = &samples[si];
        // Rejection sampling: inputs are sparse, so a random in-scope feature is almost always off.
        let mut feature = None;
        for _ in 0..64 {
            let f = in_scope[rng.gen_range(0..in_scope.len())];
            if !s.contains(f) {
                feature = Some(f);
                break;
            }
        }
        let feature = match feature {
            Some(f) => f,
            None => match in_scope.iter().copied().find(|f| !s.contains(*f)) {
                Some(f) => f,
                None => continue,
            },
        };
        trials += 1;
        let before = p_malware(m, s);
        let after = p_malware(m, &s.with_enabled(feature));
        if after < before - MONOTONE_TOLERANCE {
            counterexamples.push(Counterexample {
                sample: si,
                feature,
                before,
                after,
            });
        }
    }
    Ok(CertificateReport {
        structural,
        behavioral: counterexamples.is_empty(),
        trials,
        counterexamples,
    })
}

/// Trusts the restricted model's malware verdicts; defers to the unrestricted model otherwise.
pub fn fallback_predict(restricted: &ModelParams, unrestricted: &ModelParams, x: &Sample) -> Result<Label> {
    if restricted.feature_space_id() != unrestricted.feature_space_id()
        || restricted.n_features() != unrestricted.n_features()
    {
        return param("fallback models were built for different feature spaces");
    }
    if predict(restricted, x) == Label::Malware {
        Ok(Label::Malware)
    } else {
        Ok(predict(unrestricted, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SplitTag;
    use crate::network::{Activation, Layer, LayerSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn linear(weights: Vec<f64>, bias: f64, space_id: u64) -> ModelParams {
        let n = weights.len();
        let layer = Layer::new(LayerSpec::new(n, 1, Activation::Identity), weights, vec![bias]).unwrap();
        ModelParams::new(vec![layer], HeadKind::SigmoidSingle, space_id).unwrap()
    }

    fn dataset(samples: Vec<Sample>) -> Dataset {
        let space = Arc::new(FeatureSpace::from_manifest_indices(3, &[1, 2]).unwrap());
        Dataset::new(space, samples, SplitTag::Test).unwrap()
    }

    #[test]
    fn metric_definitions() {
        use Label::*;
        let perfect = metrics_from_predictions([(Malware, Malware), (Benign, Benign)]).unwrap();
        assert_eq!((perfect.fpr, perfect.fnr, perfect.accuracy), (0.0, 0.0, 1.0));
        let constant = metrics_from_predictions([(Malware, Malware), (Benign, Malware)]).unwrap();
        assert_eq!((constant.fpr, constant.fnr, constant.accuracy), (1.0, 0.0, 0.5));
        let mixed =
            metrics_from_predictions([(Malware, Malware), (Benign, Benign), (Benign, Malware), (Malware, Benign)])
                .unwrap();
        assert_eq!((mixed.fpr, mixed.fnr, mixed.accuracy), (0.5, 0.5, 0.5));
        assert!(metrics_from_predictions(std::iter::empty()).is_err());
    }

    #[test]
    fn evaluate_uses_model_predictions() {
        let d = dataset(vec![
            Sample::new(vec![0], Label::Malware),
            Sample::new(vec![], Label::Benign),
            Sample::new(vec![1], Label::Benign),
            Sample::new(vec![1, 2], Label::Malware),
        ]);
        let m = linear(vec![1.0, 1.0, -3.0], -0.5, d.space().checksum());
        let met = evaluate(&m, &d).unwrap();
        assert_eq!((met.fpr, met.fnr, met.accuracy), (0.5, 0.5, 0.5));
        assert!(evaluate(&m, &dataset(vec![])).is_err());
        assert_eq!(met.to_string(), "fpr 0.500000\nfnr 0.500000\naccuracy 0.500000\n");
    }

    #[test]
    fn certificate_on_monotone_and_non_monotone_nets() {
        let d = dataset(vec![Sample::new(vec![0], Label::Malware), Sample::new(vec![], Label::Benign)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let good = linear(vec![1.0, 0.0, 2.0], 0.0, 0);
        let r = certify_monotone(&good, d.space(), d.samples(), CertifyScope::AllFeatures, 200, &mut rng).unwrap();
        assert!(r.passed());
        assert!(r.counterexamples.is_empty());
        assert_eq!(r.trials, 200);

        let bad = linear(vec![1.0, -0.1, 2.0], 0.0, 0);
        let r = certify_monotone(&bad, d.space(), d.samples(), CertifyScope::AllFeatures, 200, &mut rng).unwrap();
        assert!(!r.structural);
        assert!(!r.behavioral);
        assert!(r.to_string().starts_with("structural FAIL\nbehavioral FAIL trials 200\ncounterexample"));

        let r = certify_monotone(&good, d.space(), d.samples(), CertifyScope::AllFeatures, 0, &mut rng).unwrap();
        assert!(r.passed() && r.structural_only());
        assert_eq!(r.to_string(), "structural PASS\nbehavioral PASS trials 0 structural-only\n");
    }

    #[test]
    fn manifest_certificate_ignores_code_rows() {
        let d = dataset(vec![Sample::new(vec![], Label::Malware)]);
        let m = linear(vec![-4.0, 0.5, 0.0], 1.0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = certify_monotone(&m, d.space(), d.samples(), CertifyScope::Manifest, 50, &mut rng).unwrap();
        assert!(r.passed());
        let r = certify_monotone(&m, d.space(), d.samples(), CertifyScope::AllFeatures, 50, &mut rng).unwrap();
        assert!(!r.structural);
    }

    #[test]
    fn fallback_rule() {
        let x = Sample::new(vec![0], Label::Malware);
        let says_malware = linear(vec![5.0, 0.0, 0.0], 0.0, 1);
        let says_benign = linear(vec![-5.0, 0.0, 0.0], 0.0, 1);
        assert_eq!(fallback_predict(&says_malware, &says_benign, &x).unwrap(), Label::Malware);
        assert_eq!(fallback_predict(&says_benign, &says_malware, &x).unwrap(), Label::Malware);
        assert_eq!(fallback_predict(&says_benign, &says_benign, &x).unwrap(), Label::Benign);
        let other = linear(vec![5.0, 0.0, 0.0], 0.0, 2);
        assert!(fallback_predict(&says_malware, &other, &x).is_err());
    }

    #[test]
    fn csv_layout() {
        let ok = |mr: f64| {
            Ok(RunOutcome {
                metrics: Metrics {
                    fpr: 0.1,
                    fnr: 0.2,
                    accuracy: 0.9,
                    mr: Some(mr),
                },
                mr,
                negative_mass: 1.0,
            })
        };
        let report = GridReport {
            n1_values: vec![0.0, 0.67],
            n2_values: vec![0.0],
            seeds: vec![1, 2],
            cells: vec![
                GridCell {
                    n1: 0.0,
                    n2: 0.0,
                    runs: vec![ok(0.5), ok(1.0)],
                },
                GridCell {
                    n1: 0.67,
                    n2: 0.0,
                    runs: vec![ok(0.25), Err("diverged".into())],
                },
            ],
        };
        assert_eq!(
            report.to_csv(GridMetric::Mr),
            "n1\\n2,0,0@seed1,0@seed2\n0,0.750000,0.500000,1.000000\n0.67,0.250000,0.250000,NA\n"
        );
    }
}
