//! Non-negativity defenses: N1/N2 penalties on negative values, their three
//! placements (weights, hidden pre-activations, pre-sum products), hard
//! projection onto non-negative weights, and negative-mass diagnostics.
//!
//! Biases are never penalized or projected.

use std::fmt;
use std::str::FromStr;

use crate::dataset::FeatureSpace;
use crate::error::{param, Result};
use crate::network::{Activation, ForwardTrace, Gradients, InitMode, InitScheme, Layer, ModelParams};

/// L1 penalty on the negative part: `0` for `x >= 0`, `|x|` otherwise.
pub fn n1(x: f64) -> f64 {
    if x < 0.0 {
        -x
    } else {
        0.0
    }
}

/// Subgradient of [`n1`]; `0` at the kink.
pub fn n1_grad(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// L2 penalty on the negative part: `0` for `x >= 0`, `x^2` otherwise.
pub fn n2(x: f64) -> f64 {
    if x < 0.0 {
        x * x
    } else {
        0.0
    }
}

pub fn n2_grad(x: f64) -> f64 {
    if x < 0.0 {
        2.0 * x
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardScope {
    None,
    /// Every weight clamped at zero.
    AllWeights,
    /// Everything except first-layer rows of code features.
    ManifestMonotone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Weights,
    Activations,
    Presum,
}

macro_rules! token_enum {
    ($ty:ident { $($variant:ident => $tok:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $tok),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($tok => Ok($ty::$variant),)+
                    other => Err(format!("unknown {} '{}'", stringify!($ty), other)),
                }
            }
        }
    };
}

token_enum!(HardScope { None => "none", AllWeights => "all_weights", ManifestMonotone => "manifest_monotone" });
token_enum!(Placement { Weights => "weights", Activations => "activations", Presum => "presum" });

impl FromStr for InitScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "glorot_normal" => Ok(InitScheme::GlorotNormal),
            "abs_glorot_normal" => Ok(InitScheme::AbsGlorotNormal),
            other => Err(format!("unknown init '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintConfig {
    pub hard_scope: HardScope,
    pub n1: f64,
    pub n2: f64,
    pub placement: Placement,
    pub init: InitMode,
}

impl ConstraintConfig {
    /// No projection, no penalty, Glorot-normal init.
    pub fn unconstrained(seed: u64) -> Self {
        Self {
            hard_scope: HardScope::None,
            n1: 0.0,
            n2: 0.0,
            placement: Placement::Weights,
            init: InitMode::new(InitScheme::GlorotNormal, seed),
        }
    }

    pub fn hard(scope: HardScope, seed: u64) -> Self {
        Self {
            hard_scope: scope,
            ..Self::unconstrained(seed)
        }
    }

    pub fn penalized(n1: f64, n2: f64, placement: Placement, seed: u64) -> Self {
        Self {
            n1,
            n2,
            placement,
            ..Self::unconstrained(seed)
        }
    }

    pub fn hard_nonneg(&self) -> bool {
        self.hard_scope != HardScope::None
    }

    pub fn has_penalty(&self) -> bool {
        self.n1 > 0.0 || self.n2 > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n1 >= 0.0 && self.n1.is_finite() && self.n2 >= 0.0 && self.n2.is_finite()) {
            return param(format!("penalty coefficients must be finite and >= 0, got n1={} n2={}", self.n1, self.n2));
        }
        if self.hard_nonneg() && self.has_penalty() {
            return param("hard non-negative projection requires n1 = n2 = 0");
        }
        Ok(())
    }

    /// Combined penalty `n1 * N1(x) + n2 * N2(x)`.
    pub fn penalty(&self, x: f64) -> f64 {
        self.n1 * n1(x) + self.n2 * n2(x)
    }

    pub fn penalty_grad(&self, x: f64) -> f64 {
        self.n1 * n1_grad(x) + self.n2 * n2_grad(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyReport {
    pub total: f64,
    pub per_layer: Vec<f64>,
    pub negative_mass: f64,
}

/// Weight-placement penalty over every weight entry of every layer.
///
/// The returned gradients have zero bias and input parts.
pub fn weight_penalty(m: &ModelParams, cfg: &ConstraintConfig) -> (PenaltyReport, Gradients) {
    let mut grads = Gradients::zeros_like(m);
    let per_layer: Vec<f64> = m
        .layers()
        .iter()
        .zip(grads.weights.iter_mut())
        .map(|(layer, g)| {
            let mut total = 0.0;
            for (w, gw) in layer.weights().iter().zip(g.iter_mut()) {
                if *w < 0.0 {
                    total += cfg.penalty(*w);
                    *gw = cfg.penalty_grad(*w);
                }
            }
            total
        })
        .collect();
    let report = PenaltyReport {
        total: per_layer.iter().sum(),
        per_layer,
        negative_mass: negative_mass(m),
    };
    (report, grads)
}

/// Adds the weight-placement penalty gradient, times `scale`, into `acc`; returns the penalty.
pub(crate) fn accumulate_weight_penalty(m: &ModelParams, cfg: &ConstraintConfig, scale: f64, acc: &mut Gradients) -> f64 {
    let mut total = 0.0;
    for (layer, g) in m.layers().iter().zip(acc.weights.iter_mut()) {
        for (w, gw) in layer.weights().iter().zip(g.iter_mut()) {
            if *w < 0.0 {
                total += cfg.penalty(*w);
                *gw += scale * cfg.penalty_grad(*w);
            }
        }
    }
    total
}

/// Penalty on hidden pre-activations of one forward pass.
///
/// Returns the penalty and its gradient with respect to each hidden layer's
/// pre-activation vector. Callers average over the batch.
pub fn activation_penalty(trace: &ForwardTrace, cfg: &ConstraintConfig) -> (f64, Vec<Vec<f64>>) {
    let mut total = 0.0;
    let grads = trace
        .hidden_pre()
        .iter()
        .map(|z| {
            z.iter()
                .map(|&v| {
                    total += cfg.penalty(v);
                    cfg.penalty_grad(v)
                })
                .collect()
        })
        .collect();
    (total, grads)
}

/// Pre-sum penalty of one multiply `x · W`: every product `x_k * W_kj` is
/// penalized before summation. Returns the penalty and its gradient w.r.t. `W`.
pub fn presum_penalty(x: &[f64], layer: &Layer, cfg: &ConstraintConfig) -> (f64, Vec<f64>) {
    let out = layer.spec().out_dim;
    let mut grad = vec![0.0; layer.weights().len()];
    let mut total = 0.0;
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (j, &w) in layer.row(k).iter().enumerate() {
            let p = xk * w;
            if p < 0.0 {
                total += cfg.penalty(p);
                grad[k * out + j] = cfg.penalty_grad(p) * xk;
            }
        }
    }
    (total, grad)
}

/// Pre-sum penalty over every multiply of a forward pass.
///
/// Weight gradients (times `scale`) go into `acc`. The gradient through each
/// multiply's input is added, unscaled, to `extra_pre` (hidden layers, already
/// mapped back through dropout and the activation) and, for the first layer,
/// to `acc.input` times `scale` when `want_input` is set.
pub(crate) fn accumulate_presum_penalty(
    m: &ModelParams,
    trace: &ForwardTrace,
    cfg: &ConstraintConfig,
    scale: f64,
    want_input: bool,
    acc: &mut Gradients,
    extra_pre: &mut [Vec<f64>],
) -> f64 {
    let mut total = 0.0;
    for (l, layer) in m.layers().iter().enumerate() {
        let out = layer.spec().out_dim;
        let g = &mut acc.weights[l];
        let mut visit = |k: usize, xk: f64| -> f64 {
            let mut dx = 0.0;
            for (j, &w) in layer.row(k).iter().enumerate() {
                let p = xk * w;
                if p < 0.0 {
                    let d = cfg.penalty_grad(p);
                    total += cfg.penalty(p);
                    g[k * out + j] += scale * d * xk;
                    dx += d * w;
                }
            }
            dx
        };
        if l == 0 {
            let mut input_grad = |k: usize, dx: f64| {
                if want_input {
                    acc.input[k] += scale * dx;
                }
            };
            if let Some(idx) = trace.sparse_input() {
                for &k in idx {
                    let dx = visit(k, 1.0);
                    input_grad(k, dx);
                }
            } else if let Some(x) = trace.dense_input() {
                for (k, &v) in x.iter().enumerate().filter(|(_, &v)| v != 0.0) {
                    let dx = visit(k, v);
                    input_grad(k, dx);
                }
            }
        } else {
            let prev = &m.layers()[l - 1];
            let z = &trace.pre[l - 1];
            let mask = trace.dropout_mask(l - 1);
            for (k, &v) in trace.layer_input(l).iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let dx = visit(k, v);
                let active = prev.spec().activation == Activation::Identity || z[k] > 0.0;
                if active {
                    extra_pre[l - 1][k] += dx * mask.map_or(1.0, |m| m[k]);
                }
            }
        }
    }
    total
}

/// Clamps weights in `scope` to `[0, ∞)`, in place.
pub fn project_in_place(m: &mut ModelParams, scope: HardScope, space: Option<&FeatureSpace>) -> Result<()> {
    let clamp = |ws: &mut [f64]| {
        for w in ws {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
    };
    match scope {
        HardScope::None => {}
        HardScope::AllWeights => m.layers_mut().iter_mut().for_each(|l| clamp(l.weights_mut())),
        HardScope::ManifestMonotone => {
            let Some(space) = space else {
                return param("manifest_monotone projection needs a feature space");
            };
            if space.n_features() != m.n_features() {
                return param("feature space does not match model input width");
            }
            let (first, rest) = m.layers_mut().split_first_mut().expect("non-empty model");
            for k in space.manifest_indices() {
                clamp(first.row_mut(k));
            }
            rest.iter_mut().for_each(|l| clamp(l.weights_mut()));
        }
    }
    Ok(())
}

pub fn project_nonnegative(m: &ModelParams, scope: HardScope, space: Option<&FeatureSpace>) -> Result<ModelParams> {
    let mut out = m.clone();
    project_in_place(&mut out, scope, space)?;
    Ok(out)
}

/// `Σ |min(w, 0)|` over all weights.
pub fn negative_mass(m: &ModelParams) -> f64 {
    m.all_weights().map(n1).sum()
}

/// Whether every weight covered by `scope` is non-negative.
pub fn satisfies_scope(m: &ModelParams, scope: HardScope, space: Option<&FeatureSpace>) -> bool {
    match scope {
        HardScope::None => true,
        HardScope::AllWeights => m.all_weights().all(|w| w >= 0.0),
        HardScope::ManifestMonotone => {
            let Some(space) = space else { return false };
            let (first, rest) = m.layers().split_first().expect("non-empty model");
            space.manifest_indices().iter().all(|&k| first.row(k).iter().all(|&w| w >= 0.0))
                && rest.iter().all(|l| l.weights().iter().all(|&w| w >= 0.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_eval, Activation, HeadKind, Input, LayerSpec};

    fn model_with(layers: Vec<(usize, usize, Vec<f64>)>, head: HeadKind) -> ModelParams {
        let n = layers.len();
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(i, (a, b, w))| {
                let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
                Layer::new(LayerSpec::new(a, b, act), w, vec![0.0; b]).unwrap()
            })
            .collect();
        ModelParams::new(layers, head, 0).unwrap()
    }

    #[test]
    fn penalty_values() {
        assert_eq!(n1(-2.0), 2.0);
        assert_eq!(n1(3.0), 0.0);
        assert_eq!(n1(0.0), 0.0);
        assert_eq!(n2(-0.5), 0.25);
        assert_eq!(n2(4.0), 0.0);
        assert_eq!(n2(0.0), 0.0);
        assert_eq!(n1_grad(0.0), 0.0);
        assert_eq!(n1_grad(-1e-300), -1.0);
        assert_eq!(n2_grad(-3.0), -6.0);
    }

    #[test]
    fn weight_penalty_sums_negative_parts() {
        let m = model_with(vec![(3, 1, vec![1.0, -1.0, -2.0])], HeadKind::SigmoidSingle);
        let (r, g) = weight_penalty(&m, &ConstraintConfig::penalized(1.0, 0.0, Placement::Weights, 0));
        assert_eq!(r.total, 3.0);
        assert_eq!(r.per_layer, vec![3.0]);
        assert_eq!(r.negative_mass, 3.0);
        assert_eq!(g.weights[0], vec![0.0, -1.0, -1.0]);

        let m = model_with(vec![(1, 1, vec![-1.0])], HeadKind::SigmoidSingle);
        let (r, _) = weight_penalty(&m, &ConstraintConfig::penalized(0.5, 0.5, Placement::Weights, 0));
        assert_eq!(r.total, 1.0);
    }

    #[test]
    fn nonnegative_model_has_no_penalty() {
        let m = model_with(vec![(2, 2, vec![0.0, 1.0, 2.0, 3.0]), (2, 1, vec![0.5, 0.0])], HeadKind::SigmoidSingle);
        let (r, g) = weight_penalty(&m, &ConstraintConfig::penalized(3.0, 7.0, Placement::Weights, 0));
        assert_eq!(r.total, 0.0);
        assert!(g.weights.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn activation_penalty_uses_pre_activations() {
        // One hidden unit with pre-activation -3.
        let m = model_with(vec![(1, 1, vec![-3.0]), (1, 1, vec![1.0])], HeadKind::SigmoidSingle);
        let t = forward_eval(&m, Input::Sparse(&[0]));
        let cfg = ConstraintConfig::penalized(1.0, 0.0, Placement::Activations, 0);
        let (p, g) = activation_penalty(&t, &cfg);
        assert_eq!(p, 3.0);
        assert_eq!(g, vec![vec![-1.0]]);

        let m = model_with(vec![(1, 1, vec![3.0]), (1, 1, vec![1.0])], HeadKind::SigmoidSingle);
        let t = forward_eval(&m, Input::Sparse(&[0]));
        assert_eq!(activation_penalty(&t, &cfg).0, 0.0);
    }

    #[test]
    fn presum_sees_cancelled_negative_terms() {
        let layer = Layer::new(LayerSpec::new(2, 1, Activation::Identity), vec![-1.0, 2.0], vec![0.0]).unwrap();
        let cfg = ConstraintConfig::penalized(1.0, 0.0, Placement::Presum, 0);
        let (p, g) = presum_penalty(&[1.0, 1.0], &layer, &cfg);
        assert_eq!(p, 1.0);
        assert_eq!(g, vec![-1.0, 0.0]);
        let (p, g) = presum_penalty(&[0.0, 0.0], &layer, &cfg);
        assert_eq!(p, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let m = model_with(vec![(3, 1, vec![-1.0, 2.0, -0.5])], HeadKind::SigmoidSingle);
        let p = project_nonnegative(&m, HardScope::AllWeights, None).unwrap();
        assert_eq!(p.layers()[0].weights(), &[0.0, 2.0, 0.0]);
        assert_eq!(project_nonnegative(&p, HardScope::AllWeights, None).unwrap(), p);
        assert_eq!(negative_mass(&p), 0.0);
        assert_eq!(project_nonnegative(&m, HardScope::None, None).unwrap(), m);
    }

    #[test]
    fn manifest_scope_leaves_code_rows_free() {
        // Feature 0 is manifest, feature 1 is code.
        let space = FeatureSpace::from_manifest_indices(2, &[0]).unwrap();
        let m = model_with(
            vec![(2, 1, vec![-2.0, -3.0]), (1, 1, vec![-1.0])],
            HeadKind::SigmoidSingle,
        );
        let p = project_nonnegative(&m, HardScope::ManifestMonotone, Some(&space)).unwrap();
        assert_eq!(p.layers()[0].weights(), &[0.0, -3.0]);
        assert_eq!(p.layers()[1].weights(), &[0.0]);
        assert!(satisfies_scope(&p, HardScope::ManifestMonotone, Some(&space)));
        assert!(!satisfies_scope(&p, HardScope::AllWeights, Some(&space)));
        assert!(project_nonnegative(&m, HardScope::ManifestMonotone, None).is_err());
    }

    #[test]
    fn negative_mass_definition() {
        let m = model_with(vec![(3, 1, vec![-1.0, -2.0, 3.0])], HeadKind::SigmoidSingle);
        assert_eq!(negative_mass(&m), 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(ConstraintConfig::hard(HardScope::AllWeights, 0).validate().is_ok());
        let mut c = ConstraintConfig::hard(HardScope::AllWeights, 0);
        c.n1 = 0.5;
        assert!(c.validate().is_err());
        assert!(ConstraintConfig::penalized(-1.0, 0.0, Placement::Weights, 0).validate().is_err());
        assert_eq!("presum".parse::<Placement>(), Ok(Placement::Presum));
        assert_eq!("manifest_monotone".parse::<HardScope>(), Ok(HardScope::ManifestMonotone));
        assert!("both".parse::<HardScope>().is_err());
    }
}
