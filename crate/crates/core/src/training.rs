//! Mini-batch SGD with momentum, dropout, N1/N2 penalties, per-step hard
//! projection, and two-stage distillation.
//!
//! An epoch is `ceil(n_train / batch_size)` ratio-controlled batches drawn by
//! [`Dataset::sample_batch_indices`], not a pass over a shuffled corpus.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::constraints::{
    accumulate_presum_penalty, accumulate_weight_penalty, activation_penalty, negative_mass, project_in_place,
    satisfies_scope, ConstraintConfig, HardScope, Placement,
};
use crate::dataset::Dataset;
use crate::error::{param, Error, Result};
use crate::network::{
    accumulate_backward, forward, init, loss_and_grad, predict, Architecture, ForwardTrace, Gradients, HeadKind,
    ModelParams, Target,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// `v = momentum * v - lr * g; w += v`.
    SgdMomentum,
    /// Adam with the usual `(0.9, 0.999, 1e-8)` constants; `momentum` is ignored.
    Adam,
}

impl Optimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::SgdMomentum => "sgd_momentum",
            Optimizer::Adam => "adam",
        }
    }
}

impl std::str::FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd_momentum" | "sgd" => Ok(Optimizer::SgdMomentum),
            "adam" => Ok(Optimizer::Adam),
            other => Err(format!("unknown optimizer '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub malware_ratio: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    pub dropout_rate: f64,
    pub constraint: ConstraintConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 1000,
            malware_ratio: 0.3,
            learning_rate: 0.01,
            momentum: 0.9,
            optimizer: Optimizer::SgdMomentum,
            dropout_rate: 0.5,
            constraint: ConstraintConfig::unconstrained(1),
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Sets both the batch/dropout seed and the init seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.constraint.init.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return param("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return param(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return param(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return param(format!("dropout_rate must be in [0,1), got {}", self.dropout_rate));
        }
        if !(0.0..=1.0).contains(&self.malware_ratio) {
            return param(format!("malware_ratio must be in [0,1], got {}", self.malware_ratio));
        }
        self.constraint.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch cross-entropy over the epoch's steps.
    pub loss: f64,
    /// Mean penalty term over the epoch's steps.
    pub penalty: f64,
    pub negative_mass: f64,
    /// Inference-mode accuracy on the full training set after the epoch.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.epochs {
            writeln!(
                f,
                "epoch {} loss {:.9} penalty {:.9} negmass {:.9} train_acc {:.6}",
                r.epoch, r.loss, r.penalty, r.negative_mass, r.train_accuracy
            )?;
        }
        Ok(())
    }
}

/// Trains a fresh network on hard labels.
pub fn train(d: &Dataset, arch: &Architecture, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    let targets: Vec<Target> = d.samples().iter().map(|s| Target::Hard(s.label())).collect();
    train_with_targets(d, arch, cfg, &targets)
}

/// Adds the gradient of one sample's loss plus its activation or pre-sum
/// penalty, times `scale`, into `acc`; returns the unscaled `(loss, penalty)`.
///
/// The weight-placement penalty does not depend on the sample and is left to
/// the caller (it is added once per step).
pub fn accumulate_sample_objective(
    m: &ModelParams,
    trace: &ForwardTrace,
    target: Target,
    cc: &ConstraintConfig,
    scale: f64,
    want_input: bool,
    acc: &mut Gradients,
) -> Result<(f64, f64)> {
    let (loss, dlogits) = loss_and_grad(trace.logits(), target, m.head(), trace.temperature)?;
    let (penalty, extra) = match cc.placement {
        Placement::Activations if cc.has_penalty() => {
            let (p, g) = activation_penalty(trace, cc);
            (p, Some(g))
        }
        Placement::Presum if cc.has_penalty() => {
            let mut extra: Vec<Vec<f64>> = trace.hidden_pre().iter().map(|z| vec![0.0; z.len()]).collect();
            let p = accumulate_presum_penalty(m, trace, cc, scale, want_input, acc, &mut extra);
            (p, Some(extra))
        }
        _ => (0.0, None),
    };
    accumulate_backward(m, trace, &dlogits, extra.as_deref(), scale, want_input, acc);
    Ok((loss, penalty))
}

/// Trains a fresh network against per-sample targets (`targets[i]` belongs to `d.samples()[i]`).
pub fn train_with_targets(
    d: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    targets: &[Target],
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    arch.head.validate()?;
    d.ensure_both_labels()?;
    if targets.len() != d.len() {
        return param("one target per sample required");
    }
    let space = d.space();
    let cc = cfg.constraint;
    if cc.hard_scope == HardScope::ManifestMonotone && arch.head != HeadKind::SigmoidSingle {
        return param("manifest_monotone training requires the sigmoid_single head");
    }
    let specs = arch.layer_specs(space.n_features());
    let mut model = init(&specs, arch.head, cc.init, space.checksum())?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((model, log));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grads = Gradients::zeros_like(&model);
    let mut opt = OptimizerState::new(cfg, &model);
    let n_batches = d.len().div_ceil(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut penalty_sum) = (0.0, 0.0);
        for step in 1..=n_batches {
            let batch = d.sample_batch_indices(cfg.batch_size, cfg.malware_ratio, &mut rng)?;
            let scale = 1.0 / batch.len() as f64;
            grads.clear();
            let (mut batch_loss, mut batch_penalty) = (0.0, 0.0);
            for &i in &batch {
                let x = &d.samples()[i];
                let dropout = (cfg.dropout_rate > 0.0).then_some((cfg.dropout_rate, &mut rng));
                let trace = forward(&model, x, dropout);
                let (l, p) = accumulate_sample_objective(&model, &trace, targets[i], &cc, scale, false, &mut grads)?;
                batch_loss += l;
                batch_penalty += p;
            }
            batch_loss *= scale;
            batch_penalty *= scale;
            if cc.placement == Placement::Weights && cc.has_penalty() {
                batch_penalty = accumulate_weight_penalty(&model, &cc, 1.0, &mut grads);
            }
            if !(batch_loss + batch_penalty).is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    msg: format!("non-finite objective (loss {batch_loss}, penalty {batch_penalty})"),
                });
            }
            opt.step(&mut model, &grads);
            project_in_place(&mut model, cc.hard_scope, Some(space))?;
            debug_assert!(satisfies_scope(&model, cc.hard_scope, Some(space)));
            if !model.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    msg: "non-finite parameter after update".into(),
                });
            }
            loss_sum += batch_loss;
            penalty_sum += batch_penalty;
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / n_batches as f64,
            penalty: penalty_sum / n_batches as f64,
            negative_mass: negative_mass(&model),
            train_accuracy: accuracy(&model, d),
        });
    }
    Ok((model, log))
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    momentum: f64,
    first: Gradients,
    second: Option<Gradients>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    fn new(cfg: &TrainConfig, m: &ModelParams) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            first: Gradients::zeros_like(m),
            second: (cfg.optimizer == Optimizer::Adam).then(|| Gradients::zeros_like(m)),
            t: 0,
        }
    }

    fn step(&mut self, m: &mut ModelParams, g: &Gradients) {
        self.t += 1;
        let rule = UpdateRule {
            kind: self.kind,
            lr: self.lr,
            momentum: self.momentum,
            t: self.t,
        };
        for (l, layer) in m.layers_mut().iter_mut().enumerate() {
            let (sw, sb) = match self.second.as_mut() {
                Some(s) => (Some(&mut s.weights[l][..]), Some(&mut s.biases[l][..])),
                None => (None, None),
            };
            rule.apply(layer.weights_mut(), &g.weights[l], &mut self.first.weights[l], sw);
            rule.apply(layer.bias_mut(), &g.biases[l], &mut self.first.biases[l], sb);
        }
    }
}

struct UpdateRule {
    kind: Optimizer,
    lr: f64,
    momentum: f64,
    t: i32,
}

impl UpdateRule {
    fn apply(&self, p: &mut [f64], grad: &[f64], first: &mut [f64], second: Option<&mut [f64]>) {
        match (self.kind, second) {
            (Optimizer::Adam, Some(second)) => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for (((w, gw), m1), m2) in p.iter_mut().zip(grad).zip(first.iter_mut()).zip(second.iter_mut()) {
                    *m1 = ADAM_BETA1 * *m1 + (1.0 - ADAM_BETA1) * gw;
                    *m2 = ADAM_BETA2 * *m2 + (1.0 - ADAM_BETA2) * gw * gw;
                    *w -= self.lr * (*m1 / c1) / ((*m2 / c2).sqrt() + ADAM_EPS);
                }
            }
            _ => {
                for ((w, gw), v) in p.iter_mut().zip(grad).zip(first.iter_mut()) {
                    *v = self.momentum * *v - self.lr * gw;
                    *w += *v;
                }
            }
        }
    }
}

/// Inference-mode accuracy (temperature 1).
pub fn accuracy(m: &ModelParams, d: &Dataset) -> f64 {
    if d.is_empty() {
        return 0.0;
    }
    let correct = d.samples().iter().filter(|s| predict(m, s) == s.label()).count();
    correct as f64 / d.len() as f64
}

/// Soft labels `[p_benign, p_malware]` of `m` at its own head temperature, inference mode.
pub fn soft_labels(m: &ModelParams, d: &Dataset) -> Vec<[f64; 2]> {
    d.samples()
        .iter()
        .map(|s| {
            let t = forward::<ChaCha8Rng>(m, s, None);
            [t.probs[0], t.probs[1]]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distilled {
    pub teacher: ModelParams,
    pub student: ModelParams,
    pub teacher_log: TrainLog,
    pub student_log: TrainLog,
}

/// Two-stage distillation at a single temperature.
///
/// The teacher is trained at `temperature` on hard labels; its softened
/// outputs on every training sample become the student's targets. Both
/// networks keep `temperature` in their head and predict at temperature 1.
pub fn train_distilled(d: &Dataset, arch: &Architecture, cfg: &DistillConfig) -> Result<Distilled> {
    if !matches!(arch.head, HeadKind::SoftmaxPair { .. }) {
        return param("distillation requires the softmax_pair head");
    }
    let head = HeadKind::softmax(cfg.temperature);
    head.validate()?;
    let arch = Architecture::new(arch.hidden.clone(), head);
    let (teacher, teacher_log) = train(d, &arch, &cfg.teacher_train)?;
    let targets: Vec<Target> = soft_labels(&teacher, d).into_iter().map(Target::Soft).collect();
    let (student, student_log) = train_with_targets(d, &arch, &cfg.student_train, &targets)?;
    Ok(Distilled {
        teacher,
        student,
        teacher_log,
        student_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureSpace, Label, Sample, SplitTag};
    use std::sync::Arc;

    /// 10 features; malware iff feature 0 is on (feature 0 is a manifest feature).
    fn separable() -> Dataset {
        let space = Arc::new(FeatureSpace::from_manifest_indices(10, &[0, 1, 2, 3, 4]).unwrap());
        let mut samples = Vec::new();
        for i in 0..40usize {
            let noise = vec![1 + i % 9, 1 + (i * 7) % 9];
            let mut idx = noise.clone();
            if i % 2 == 0 {
                idx.push(0);
            }
            let label = if i % 2 == 0 { Label::Malware } else { Label::Benign };
            samples.push(Sample::new(idx, label));
        }
        Dataset::new(space, samples, SplitTag::Train).unwrap()
    }

    fn toy_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 50,
            batch_size: 20,
            malware_ratio: 0.5,
            learning_rate: 0.05,
            dropout_rate: 0.0,
            ..TrainConfig::default()
        }
        .with_seed(seed)
    }

    #[test]
    fn hand_solved_linear_model_separates_toy_set() {
        // w0 = 2 on the indicator, bias -1: logit +1 for malware, -1 for benign.
        let d = separable();
        for s in d.samples() {
            let z = if s.contains(0) { 1.0 } else { -1.0 };
            assert_eq!(z > 0.0, s.label().is_malware());
        }
    }

    #[test]
    fn unconstrained_training_fits_separable_set() {
        let d = separable();
        let arch = Architecture::new(vec![8, 8], HeadKind::SigmoidSingle);
        let (m, log) = train(&d, &arch, &toy_cfg(3)).unwrap();
        assert_eq!(accuracy(&m, &d), 1.0);
        assert_eq!(log.epochs.len(), 50);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let d = separable();
        let arch = Architecture::new(vec![4], HeadKind::SigmoidSingle);
        let mut cfg = toy_cfg(1);
        cfg.epochs = 0;
        let (m, log) = train(&d, &arch, &cfg).unwrap();
        let specs = arch.layer_specs(10);
        let fresh = init(&specs, arch.head, cfg.constraint.init, d.space().checksum()).unwrap();
        assert_eq!(m, fresh);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn hard_projection_zeroes_negative_mass_every_epoch() {
        let d = separable();
        let arch = Architecture::new(vec![6, 6], HeadKind::SigmoidSingle);
        let mut cfg = toy_cfg(2);
        cfg.epochs = 5;
        cfg.constraint.hard_scope = HardScope::AllWeights;
        let (m, log) = train(&d, &arch, &cfg).unwrap();
        assert_eq!(negative_mass(&m), 0.0);
        assert!(log.epochs.iter().all(|r| r.negative_mass == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let d = separable();
        let arch = Architecture::new(vec![6], HeadKind::softmax(2.0));
        let mut cfg = toy_cfg(5);
        cfg.epochs = 3;
        cfg.dropout_rate = 0.5;
        cfg.constraint.n1 = 0.1;
        cfg.constraint.placement = Placement::Presum;
        assert_eq!(train(&d, &arch, &cfg).unwrap(), train(&d, &arch, &cfg).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let d = separable();
        let arch = Architecture::new(vec![8, 8], HeadKind::SigmoidSingle);
        let mut cfg = toy_cfg(1);
        cfg.learning_rate = 1e200;
        cfg.momentum = 0.0;
        match train(&d, &arch, &cfg) {
            Err(Error::Divergence { epoch, step, .. }) => assert!(epoch >= 1 && step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let d = separable();
        let arch = Architecture::new(vec![4], HeadKind::SigmoidSingle);
        let mut cfg = toy_cfg(1);
        cfg.batch_size = 0;
        assert!(train(&d, &arch, &cfg).is_err());
        let mut cfg = toy_cfg(1);
        cfg.constraint.hard_scope = HardScope::AllWeights;
        cfg.constraint.n1 = 1.0;
        assert!(train(&d, &arch, &cfg).is_err());
        let mut cfg = toy_cfg(1);
        cfg.constraint.hard_scope = HardScope::ManifestMonotone;
        assert!(train(&d, &Architecture::new(vec![4], HeadKind::softmax(1.0)), &cfg).is_err());
    }

    #[test]
    fn log_line_format() {
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 1,
                loss: 0.5,
                penalty: 0.0,
                negative_mass: 2.0,
                train_accuracy: 0.75,
            }],
        };
        assert_eq!(
            log.to_string(),
            "epoch 1 loss 0.500000000 penalty 0.000000000 negmass 2.000000000 train_acc 0.750000\n"
        );
    }

    #[test]
    fn distillation_at_t1_tracks_teacher() {
        let d = separable();
        let arch = Architecture::new(vec![8, 8], HeadKind::softmax(1.0));
        let cfg = DistillConfig {
            temperature: 1.0,
            teacher_train: toy_cfg(1),
            student_train: toy_cfg(2),
        };
        let out = train_distilled(&d, &arch, &cfg).unwrap();
        let (ta, sa) = (accuracy(&out.teacher, &d), accuracy(&out.student, &d));
        assert!((ta - sa).abs() <= 0.02, "teacher {ta} student {sa}");
        assert_eq!(out.teacher.layers().len(), out.student.layers().len());
        for (a, b) in out.teacher.layers().iter().zip(out.student.layers()) {
            assert_eq!(a.spec(), b.spec());
        }
        assert!(train_distilled(&d, &Architecture::new(vec![4], HeadKind::SigmoidSingle), &cfg).is_err());
    }

    #[test]
    fn huge_temperature_flattens_soft_labels() {
        let d = separable();
        let arch = Architecture::new(vec![8], HeadKind::softmax(1.0));
        let (m, _) = train(&d, &arch, &toy_cfg(1)).unwrap();
        let mut hot = m.clone();
        hot.set_head(HeadKind::softmax(1e6)).unwrap();
        for t in soft_labels(&hot, &d) {
            assert!((t[1] - 0.5).abs() < 1e-4);
        }
    }
}
