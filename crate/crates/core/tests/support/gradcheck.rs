// Central finite-difference check of the full training objective.
//
// The objective is recomputed here by a naive dense forward pass that shares
// nothing with the crate's forward/backward code; only the parameters are
// read from `ModelParams`.

use monoguard::constraints::{weight_penalty, ConstraintConfig, Placement};
use monoguard::network::{
    forward_input, Activation, Gradients, HeadKind, Input, Layer, LayerSpec, ModelParams, Target,
};
use monoguard::training::accumulate_sample_objective;
use monoguard::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const EPS: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-3;
/// Relative error is measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

pub struct Case {
    pub model: ModelParams,
    pub x: Vec<f64>,
    pub target: Target,
    pub cfg: ConstraintConfig,
}

#[derive(Debug, Default, Clone)]
pub struct Outcome {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn merge(&mut self, o: Outcome) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.max_rel = self.max_rel.max(o.max_rel);
        self.failures.extend(o.failures);
    }
}

/// Net `i` of a suite: heads alternate, placements cycle, sizes are random.
pub fn random_case(i: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(i as u64));
    let n_features = rng.gen_range(5..=50);
    let h1 = rng.gen_range(2..=16);
    let h2 = rng.gen_range(2..=16);
    let head = if i % 2 == 0 {
        HeadKind::SigmoidSingle
    } else {
        HeadKind::softmax([1.0, 2.5, 10.0][rng.gen_range(0..3)])
    };
    let placement = [Placement::Weights, Placement::Activations, Placement::Presum][(i / 2) % 3];
    let dims = [n_features, h1, h2, head.outputs()];
    let w = Normal::new(0.0, 0.5).unwrap();
    let b = Normal::new(0.0, 0.1).unwrap();
    let layers = (0..3)
        .map(|l| {
            let act = if l < 2 { Activation::Relu } else { Activation::Identity };
            let spec = LayerSpec::new(dims[l], dims[l + 1], act);
            let weights = (0..dims[l] * dims[l + 1]).map(|_| w.sample(&mut rng)).collect();
            let bias = (0..dims[l + 1]).map(|_| b.sample(&mut rng)).collect();
            Layer::new(spec, weights, bias).unwrap()
        })
        .collect();
    let model = ModelParams::new(layers, head, 0).unwrap();
    let x = (0..n_features).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() }).collect();
    let target = match (head, rng.gen_range(0..3)) {
        (HeadKind::SoftmaxPair { .. }, 0) => {
            let t: f64 = rng.gen();
            Target::Soft([1.0 - t, t])
        }
        (_, k) => Target::Hard(if k == 1 { Label::Malware } else { Label::Benign }),
    };
    let cfg = ConstraintConfig::penalized(rng.gen_range(0.1..1.5), rng.gen_range(0.1..1.5), placement, 0);
    Case { model, x, target, cfg }
}

struct Naive {
    value: f64,
    /// Every quantity whose sign flips the objective's branch.
    kinks: Vec<f64>,
}

fn naive_objective(m: &ModelParams, x: &[f64], target: Target, cfg: &ConstraintConfig) -> Naive {
    let pen = |v: f64| if v < 0.0 { cfg.n1 * -v + cfg.n2 * v * v } else { 0.0 };
    let mut kinks = Vec::new();
    let mut penalty = 0.0;
    let mut a = x.to_vec();
    let n_layers = m.layers().len();
    let mut logits = Vec::new();
    for (l, layer) in m.layers().iter().enumerate() {
        let spec = layer.spec();
        let mut z = layer.bias().to_vec();
        for k in 0..spec.in_dim {
            for j in 0..spec.out_dim {
                let p = a[k] * layer.weight(k, j);
                z[j] += p;
                if cfg.placement == Placement::Presum {
                    penalty += pen(p);
                    kinks.push(p);
                }
            }
        }
        if cfg.placement == Placement::Weights {
            for &w in layer.weights() {
                penalty += pen(w);
                kinks.push(w);
            }
        }
        if l + 1 < n_layers {
            if cfg.placement == Placement::Activations {
                for &v in &z {
                    penalty += pen(v);
                }
            }
            kinks.extend(z.iter().copied());
            a = z.iter().map(|&v| v.max(0.0)).collect();
        } else {
            logits = z;
        }
    }
    let loss = match m.head() {
        HeadKind::SigmoidSingle => {
            let y = match target {
                Target::Hard(l) => l.is_malware() as u8 as f64,
                Target::Soft(t) => t[1],
            };
            let p = 1.0 / (1.0 + (-logits[0]).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
        HeadKind::SoftmaxPair { temperature } => {
            let t = match target {
                Target::Hard(Label::Benign) => [1.0, 0.0],
                Target::Hard(Label::Malware) => [0.0, 1.0],
                Target::Soft(t) => t,
            };
            let e0 = (logits[0] / temperature).exp();
            let e1 = (logits[1] / temperature).exp();
            -(t[0] * (e0 / (e0 + e1)).ln() + t[1] * (e1 / (e0 + e1)).ln())
        }
    };
    Naive {
        value: loss + penalty,
        kinks,
    }
}

fn analytic(case: &Case) -> Gradients {
    let m = &case.model;
    let trace = forward_input::<ChaCha8Rng>(m, Input::Dense(&case.x), None, m.head().temperature());
    let mut g = Gradients::zeros_like(m);
    accumulate_sample_objective(m, &trace, case.target, &case.cfg, 1.0, true, &mut g).unwrap();
    if case.cfg.placement == Placement::Weights {
        let (_, wg) = weight_penalty(m, &case.cfg);
        for (acc, add) in g.weights.iter_mut().zip(&wg.weights) {
            for (a, b) in acc.iter_mut().zip(add) {
                *a += b;
            }
        }
    }
    g
}

fn compare(label: String, a: f64, plus: &Naive, minus: &Naive, base: &Naive, out: &mut Outcome) {
    let near_kink = base
        .kinks
        .iter()
        .zip(plus.kinks.iter().zip(&minus.kinks))
        .any(|(q, (qp, qm))| qp != qm && q.abs() < KINK_MARGIN);
    if near_kink {
        out.skipped += 1;
        return;
    }
    let numeric = (plus.value - minus.value) / (2.0 * EPS);
    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
    out.checked += 1;
    out.max_rel = out.max_rel.max(rel);
    if rel > REL_TOL {
        out.failures.push(format!("{label}: analytic {a:e} numeric {numeric:e} rel {rel:e}"));
    }
}

/// Checks every weight, bias and input entry of one case.
pub fn check_case(case: &Case) -> Outcome {
    let g = analytic(case);
    let base = naive_objective(&case.model, &case.x, case.target, &case.cfg);
    let mut out = Outcome::default();
    let eval = |m: &ModelParams, x: &[f64]| naive_objective(m, x, case.target, &case.cfg);

    for l in 0..case.model.layers().len() {
        for e in 0..case.model.layers()[l].weights().len() {
            let mut mp = case.model.clone();
            mp.layers_mut()[l].weights_mut()[e] += EPS;
            let mut mm = case.model.clone();
            mm.layers_mut()[l].weights_mut()[e] -= EPS;
            compare(format!("w[{l}][{e}]"), g.weights[l][e], &eval(&mp, &case.x), &eval(&mm, &case.x), &base, &mut out);
        }
        for e in 0..case.model.layers()[l].bias().len() {
            let mut mp = case.model.clone();
            mp.layers_mut()[l].bias_mut()[e] += EPS;
            let mut mm = case.model.clone();
            mm.layers_mut()[l].bias_mut()[e] -= EPS;
            compare(format!("b[{l}][{e}]"), g.biases[l][e], &eval(&mp, &case.x), &eval(&mm, &case.x), &base, &mut out);
        }
    }
    for k in 0..case.x.len() {
        let mut xp = case.x.clone();
        xp[k] += EPS;
        let mut xm = case.x.clone();
        xm[k] -= EPS;
        compare(format!("x[{k}]"), g.input[k], &eval(&case.model, &xp), &eval(&case.model, &xm), &base, &mut out);
    }
    out
}

/// Runs `n` random cases; failure labels are prefixed with the case number.
pub fn run_suite(n: usize, seed: u64) -> Outcome {
    let mut total = Outcome::default();
    for i in 0..n {
        let case = random_case(i, seed);
        let mut o = check_case(&case);
        for f in &mut o.failures {
            *f = format!("net {i} ({} {}): {f}", case.model.head().name(), case.cfg.placement);
        }
        total.merge(o);
    }
    total
}
