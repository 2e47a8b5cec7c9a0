//! Fully connected ReLU network over sparse binary inputs.
//!
//! Forward and backward passes are written out by hand. The first layer
//! multiply sums the weight rows of enabled features only, so a forward pass
//! costs `O(nnz * hidden)` instead of `O(n_features * hidden)`.
//!
//! Two output heads exist: a single logistic unit, used by the constrained
//! (monotone) networks, and a two-unit temperature softmax for the baseline
//! and distilled networks. Softmax outputs are ordered `[benign, malware]`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Fnv1a, Label, Sample};
use crate::error::{param, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadKind {
    /// One logistic output unit producing `p_malware`.
    SigmoidSingle,
    /// Two logits `[benign, malware]` through a softmax at `temperature`.
    SoftmaxPair { temperature: f64 },
}

impl HeadKind {
    pub fn softmax(temperature: f64) -> Self {
        HeadKind::SoftmaxPair { temperature }
    }

    pub fn outputs(self) -> usize {
        match self {
            HeadKind::SigmoidSingle => 1,
            HeadKind::SoftmaxPair { .. } => 2,
        }
    }

    pub fn temperature(self) -> f64 {
        match self {
            HeadKind::SigmoidSingle => 1.0,
            HeadKind::SoftmaxPair { temperature } => temperature,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::SigmoidSingle => "sigmoid_single",
            HeadKind::SoftmaxPair { .. } => "softmax_pair",
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            HeadKind::SoftmaxPair { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                param(format!("temperature must be positive, got {temperature}"))
            }
            _ => Ok(()),
        }
    }
}

/// Hidden widths plus head; expands to layer specs once the feature count is known.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub head: HeadKind,
}

impl Architecture {
    pub fn new(hidden: Vec<usize>, head: HeadKind) -> Self {
        Self { hidden, head }
    }

    /// 200-200 ReLU hidden layers.
    pub fn desk_default(head: HeadKind) -> Self {
        Self::new(vec![200, 200], head)
    }

    pub fn layer_specs(&self, n_features: usize) -> Vec<LayerSpec> {
        let mut dims = vec![n_features];
        dims.extend_from_slice(&self.hidden);
        let mut specs: Vec<LayerSpec> = dims
            .windows(2)
            .map(|w| LayerSpec::new(w[0], w[1], Activation::Relu))
            .collect();
        specs.push(LayerSpec::new(*dims.last().unwrap(), self.head.outputs(), Activation::Identity));
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    GlorotNormal,
    AbsGlorotNormal,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::GlorotNormal => "glorot_normal",
            InitScheme::AbsGlorotNormal => "abs_glorot_normal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitMode {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl InitMode {
    pub fn new(scheme: InitScheme, seed: u64) -> Self {
        Self { scheme, seed }
    }
}

/// Dense layer: `in_dim x out_dim` row-major weights and an `out_dim` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    pub fn new(spec: LayerSpec, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if spec.in_dim == 0 || spec.out_dim == 0 {
            return Err(Error::Construction("layer dims must be positive".into()));
        }
        if weights.len() != spec.in_dim * spec.out_dim || bias.len() != spec.out_dim {
            return Err(Error::Construction(format!(
                "layer {}x{} got {} weights and {} biases",
                spec.in_dim,
                spec.out_dim,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self { spec, weights, bias })
    }

    pub fn spec(&self) -> LayerSpec {
        self.spec
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Outgoing weights of input unit `k`.
    pub fn row(&self, k: usize) -> &[f64] {
        let o = self.spec.out_dim;
        &self.weights[k * o..(k + 1) * o]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        let o = self.spec.out_dim;
        &mut self.weights[k * o..(k + 1) * o]
    }

    pub fn weight(&self, k: usize, j: usize) -> f64 {
        self.weights[k * self.spec.out_dim + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
    head: HeadKind,
    feature_space_id: u64,
}

impl ModelParams {
    pub fn new(layers: Vec<Layer>, head: HeadKind, feature_space_id: u64) -> Result<Self> {
        head.validate()?;
        if layers.is_empty() {
            return Err(Error::Construction("model needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].spec.out_dim != w[1].spec.in_dim {
                return Err(Error::Construction(format!(
                    "layer dims do not chain: {} -> {}",
                    w[0].spec.out_dim, w[1].spec.in_dim
                )));
            }
        }
        let last = layers.last().unwrap().spec;
        if last.out_dim != head.outputs() {
            return Err(Error::Construction(format!(
                "{} head needs {} outputs, last layer has {}",
                head.name(),
                head.outputs(),
                last.out_dim
            )));
        }
        if layers
            .iter()
            .any(|l| l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()))
        {
            return Err(Error::Construction("non-finite parameter".into()));
        }
        Ok(Self {
            layers,
            head,
            feature_space_id,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn set_head(&mut self, head: HeadKind) -> Result<()> {
        head.validate()?;
        if head.outputs() != self.head.outputs() {
            return param("cannot change head arity");
        }
        self.head = head;
        Ok(())
    }

    pub fn feature_space_id(&self) -> u64 {
        self.feature_space_id
    }

    pub fn n_features(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn n_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn all_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Glorot-normal (optionally absolute-valued) weights, zero biases.
pub fn init(arch: &[LayerSpec], head: HeadKind, mode: InitMode, feature_space_id: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(mode.seed);
    let mut layers = Vec::with_capacity(arch.len());
    for spec in arch {
        if spec.in_dim == 0 || spec.out_dim == 0 {
            return Err(Error::Construction("layer dims must be positive".into()));
        }
        let std = (2.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weights = (0..spec.in_dim * spec.out_dim)
            .map(|_| {
                let w: f64 = normal.sample(&mut rng);
                match mode.scheme {
                    InitScheme::GlorotNormal => w,
                    InitScheme::AbsGlorotNormal => w.abs(),
                }
            })
            .collect();
        layers.push(Layer::new(*spec, weights, vec![0.0; spec.out_dim])?);
    }
    ModelParams::new(layers, head, feature_space_id)
}

/// Network input: enabled indices of a binary vector, or an arbitrary dense vector.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Sparse(&'a [usize]),
    Dense(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq)]
enum OwnedInput {
    Sparse(Vec<usize>),
    Dense(Vec<f64>),
}

/// Everything a forward pass computed, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    input: OwnedInput,
    /// Pre-activation of every layer; the last entry holds the logits.
    pub pre: Vec<Vec<f64>>,
    /// Post-activation (after dropout) of every hidden layer.
    pub post: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    pub temperature: f64,
    /// `[p_malware]` for the sigmoid head, `[p_benign, p_malware]` for softmax.
    pub probs: Vec<f64>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }

    pub fn p_malware(&self) -> f64 {
        *self.probs.last().expect("non-empty output")
    }

    /// The activation vector that entered layer `l`'s multiply (dense form), for `l >= 1`.
    pub fn layer_input(&self, l: usize) -> &[f64] {
        &self.post[l - 1]
    }

    /// Inverted-dropout scale factors applied to hidden layer `l`, if any.
    pub fn dropout_mask(&self, l: usize) -> Option<&[f64]> {
        self.masks[l].as_deref()
    }

    pub fn hidden_pre(&self) -> &[Vec<f64>] {
        &self.pre[..self.pre.len() - 1]
    }

    /// Enabled indices when the pass ran on a sparse input.
    pub fn sparse_input(&self) -> Option<&[usize]> {
        match &self.input {
            OwnedInput::Sparse(idx) => Some(idx),
            OwnedInput::Dense(_) => None,
        }
    }

    /// Dense input when the pass ran on one.
    pub fn dense_input(&self) -> Option<&[f64]> {
        match &self.input {
            OwnedInput::Dense(x) => Some(x),
            OwnedInput::Sparse(_) => None,
        }
    }
}

/// Optional dropout: `(rate, rng)`.
pub type Dropout<'r, R> = Option<(f64, &'r mut R)>;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `logits / temperature` with max-subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temperature));
    let exps: Vec<f64> = logits.iter().map(|&z| (z / temperature - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn head_probs(head: HeadKind, logits: &[f64], temperature: f64) -> Vec<f64> {
    match head {
        HeadKind::SigmoidSingle => vec![sigmoid(logits[0])],
        HeadKind::SoftmaxPair { .. } => softmax(logits, temperature),
    }
}

/// General forward pass at an explicit softmax temperature.
pub fn forward_input<R: Rng + ?Sized>(
    m: &ModelParams,
    input: Input<'_>,
    mut dropout: Dropout<'_, R>,
    temperature: f64,
) -> ForwardTrace {
    let n_layers = m.layers.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_layers - 1);
    let mut masks = Vec::with_capacity(n_layers - 1);

    for (l, layer) in m.layers.iter().enumerate() {
        let mut z = layer.bias.clone();
        if l == 0 {
            match input {
                Input::Sparse(idx) => {
                    for &k in idx {
                        for (zj, w) in z.iter_mut().zip(layer.row(k)) {
                            *zj += w;
                        }
                    }
                }
                Input::Dense(x) => dense_accumulate(layer, x, &mut z),
            }
        } else {
            dense_accumulate(layer, &post[l - 1], &mut z);
        }
        if l + 1 < n_layers {
            let mut a: Vec<f64> = match layer.spec.activation {
                Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
                Activation::Identity => z.clone(),
            };
            let mask = match dropout.as_mut() {
                Some((rate, rng)) if *rate > 0.0 => {
                    let keep = 1.0 / (1.0 - *rate);
                    let mask: Vec<f64> = (0..a.len())
                        .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { keep })
                        .collect();
                    for (v, s) in a.iter_mut().zip(&mask) {
                        *v *= s;
                    }
                    Some(mask)
                }
                _ => None,
            };
            masks.push(mask);
            post.push(a);
        }
        pre.push(z);
    }
    let probs = head_probs(m.head, pre.last().unwrap(), temperature);
    ForwardTrace {
        input: match input {
            Input::Sparse(idx) => OwnedInput::Sparse(idx.to_vec()),
            Input::Dense(x) => OwnedInput::Dense(x.to_vec()),
        },
        pre,
        post,
        masks,
        temperature,
        probs,
    }
}

fn dense_accumulate(layer: &Layer, x: &[f64], z: &mut [f64]) {
    for (k, &xk) in x.iter().enumerate() {
        if xk != 0.0 {
            for (zj, w) in z.iter_mut().zip(layer.row(k)) {
                *zj += xk * w;
            }
        }
    }
}

/// Forward pass at the head's own (training) temperature.
pub fn forward<R: Rng + ?Sized>(m: &ModelParams, x: &Sample, dropout: Dropout<'_, R>) -> ForwardTrace {
    forward_input(m, Input::Sparse(x.indices()), dropout, m.head.temperature())
}

/// Inference-mode forward pass at temperature 1 (deployment convention).
pub fn forward_eval(m: &ModelParams, input: Input<'_>) -> ForwardTrace {
    forward_input::<ChaCha8Rng>(m, input, None, 1.0)
}

/// `p_malware` at temperature 1.
pub fn p_malware(m: &ModelParams, x: &Sample) -> f64 {
    forward_eval(m, Input::Sparse(x.indices())).p_malware()
}

/// Threshold at 0.5; an exact tie is classified malware.
pub fn classify(p_malware: f64) -> Label {
    if p_malware >= 0.5 {
        Label::Malware
    } else {
        Label::Benign
    }
}

pub fn predict(m: &ModelParams, x: &Sample) -> Label {
    classify(p_malware(m, x))
}

/// Training target: a hard label or a `[p_benign, p_malware]` distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Hard(Label),
    Soft([f64; 2]),
}

impl Target {
    fn malware_prob(self) -> f64 {
        match self {
            Target::Hard(l) => l.is_malware() as u8 as f64,
            Target::Soft(t) => t[1],
        }
    }

    fn validate(self) -> Result<()> {
        if let Target::Soft(t) = self {
            let ok = t.iter().all(|&v| (0.0..=1.0).contains(&v)) && (t[0] + t[1] - 1.0).abs() <= 1e-9;
            if !ok {
                return param(format!("soft target {t:?} is not a distribution"));
            }
        }
        Ok(())
    }
}

/// Cross-entropy loss and its gradient with respect to the logits.
///
/// The sigmoid head uses binary cross-entropy on the single logit. The
/// softmax head divides logits by `temperature` before the softmax, so the
/// logit gradient carries a `1/temperature` factor.
pub fn loss_and_grad(logits: &[f64], target: Target, head: HeadKind, temperature: f64) -> Result<(f64, Vec<f64>)> {
    target.validate()?;
    match head {
        HeadKind::SigmoidSingle => {
            let z = logits[0];
            let y = target.malware_prob();
            let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
            Ok((softplus - y * z, vec![sigmoid(z) - y]))
        }
        HeadKind::SoftmaxPair { .. } => {
            let t = match target {
                Target::Hard(Label::Benign) => [1.0, 0.0],
                Target::Hard(Label::Malware) => [0.0, 1.0],
                Target::Soft(t) => t,
            };
            let u: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
            let max = u.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + u.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let loss = -t.iter().zip(&u).map(|(ti, ui)| if *ti > 0.0 { ti * (ui - lse) } else { 0.0 }).sum::<f64>();
            let grad = u.iter().zip(&t).map(|(ui, ti)| ((ui - lse).exp() - ti) / temperature).collect();
            Ok((loss, grad))
        }
    }
}

/// Cross-entropy of a trace's output against `target` at the trace's temperature.
pub fn loss(m: &ModelParams, trace: &ForwardTrace, target: Target) -> Result<f64> {
    loss_and_grad(trace.logits(), target, m.head, trace.temperature).map(|(l, _)| l)
}

/// Gradient of `p_malware` with respect to the logits, in output form.
///
/// Both heads use `p * (1 - p)` evaluated on the computed probability, so the
/// gradient is exactly zero once `p_malware` rounds to 1 (a saturated head).
pub fn p_malware_logit_grad(head: HeadKind, logits: &[f64], temperature: f64) -> Vec<f64> {
    match head {
        HeadKind::SigmoidSingle => {
            let p = sigmoid(logits[0]);
            vec![p * (1.0 - p)]
        }
        HeadKind::SoftmaxPair { .. } => {
            let p = softmax(logits, temperature)[1];
            let g = p * (1.0 - p) / temperature;
            vec![-g, g]
        }
    }
}

/// Dense gradients, shaped like a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Gradient with respect to every input feature (length `n_features`).
    pub input: Vec<f64>,
    pub loss: f64,
}

impl Gradients {
    pub fn zeros_like(m: &ModelParams) -> Self {
        Self {
            weights: m.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: m.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            input: vec![0.0; m.n_features()],
            loss: 0.0,
        }
    }

    pub fn clear(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.fill(0.0);
        }
        self.input.fill(0.0);
        self.loss = 0.0;
    }
}

/// Backpropagates `dlogits` (plus optional extra gradients on the hidden
/// pre-activations) through `trace`, adding `scale` times the result into `acc`.
///
/// Only first-layer rows of non-zero inputs are touched. The input gradient
/// is filled only when `want_input` is set; it is a dense `n_features x hidden`
/// product and dominates the cost when requested.
pub fn accumulate_backward(
    m: &ModelParams,
    trace: &ForwardTrace,
    dlogits: &[f64],
    extra_pre: Option<&[Vec<f64>]>,
    scale: f64,
    want_input: bool,
    acc: &mut Gradients,
) {
    let mut delta: Vec<f64> = dlogits.to_vec();
    for l in (0..m.layers.len()).rev() {
        let layer = &m.layers[l];
        let out = layer.spec.out_dim;
        let gw = &mut acc.weights[l];
        for (b, d) in acc.biases[l].iter_mut().zip(&delta) {
            *b += scale * d;
        }
        if l == 0 {
            match &trace.input {
                OwnedInput::Sparse(idx) => {
                    for &k in idx {
                        for (g, d) in gw[k * out..(k + 1) * out].iter_mut().zip(&delta) {
                            *g += scale * d;
                        }
                    }
                }
                OwnedInput::Dense(x) => {
                    for (k, &xk) in x.iter().enumerate() {
                        if xk != 0.0 {
                            for (g, d) in gw[k * out..(k + 1) * out].iter_mut().zip(&delta) {
                                *g += scale * xk * d;
                            }
                        }
                    }
                }
            }
            if want_input {
                for (k, gx) in acc.input.iter_mut().enumerate() {
                    *gx += scale * dot(layer.row(k), &delta);
                }
            }
            break;
        }
        let a_in = &trace.post[l - 1];
        for (k, &ak) in a_in.iter().enumerate() {
            if ak != 0.0 {
                for (g, d) in gw[k * out..(k + 1) * out].iter_mut().zip(&delta) {
                    *g += scale * ak * d;
                }
            }
        }
        let prev = &m.layers[l - 1];
        let z_prev = &trace.pre[l - 1];
        let mask = trace.masks[l - 1].as_deref();
        let mut next = vec![0.0; layer.spec.in_dim];
        for (k, nk) in next.iter_mut().enumerate() {
            let active = match prev.spec.activation {
                Activation::Relu => z_prev[k] > 0.0,
                Activation::Identity => true,
            };
            if active {
                let mut v = dot(layer.row(k), &delta);
                if let Some(mask) = mask {
                    v *= mask[k];
                }
                *nk = v;
            }
            if let Some(extra) = extra_pre {
                *nk += extra[l - 1][k];
            }
        }
        delta = next;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact gradients of the cross-entropy loss for one trace, including the input gradient.
pub fn backward(m: &ModelParams, trace: &ForwardTrace, target: Target) -> Result<Gradients> {
    let (l, dlogits) = loss_and_grad(trace.logits(), target, m.head, trace.temperature)?;
    let mut g = Gradients::zeros_like(m);
    accumulate_backward(m, trace, &dlogits, None, 1.0, true, &mut g);
    g.loss = l;
    Ok(g)
}

/// Dense gradient of `p_malware` (temperature 1) with respect to the input.
pub fn input_gradient(m: &ModelParams, x: &Sample) -> Vec<f64> {
    let all: Vec<usize> = (0..m.n_features()).collect();
    input_gradient_at(m, x, &all).1
}

/// `p_malware` (temperature 1) and its input gradient restricted to `features`.
pub fn input_gradient_at(m: &ModelParams, x: &Sample, features: &[usize]) -> (f64, Vec<f64>) {
    let trace = forward_eval(m, Input::Sparse(x.indices()));
    let p = trace.p_malware();
    let mut delta = p_malware_logit_grad(m.head, trace.logits(), trace.temperature);
    for l in (1..m.layers.len()).rev() {
        let layer = &m.layers[l];
        let z_prev = &trace.pre[l - 1];
        let relu = m.layers[l - 1].spec.activation == Activation::Relu;
        delta = (0..layer.spec.in_dim)
            .map(|k| if !relu || z_prev[k] > 0.0 { dot(layer.row(k), &delta) } else { 0.0 })
            .collect();
    }
    let first = &m.layers[0];
    (p, features.iter().map(|&k| dot(first.row(k), &delta)).collect())
}

const MAGIC: &str = "mgmodel";
const VERSION: &str = "v1";

/// Versioned text encoding with 17-significant-digit floats and an FNV-1a trailer.
pub fn serialize(m: &ModelParams) -> Vec<u8> {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{MAGIC} {VERSION} {} {:.16e} {} {:016x}",
        m.head.name(),
        m.head.temperature(),
        m.layers.len(),
        m.feature_space_id
    );
    for layer in &m.layers {
        let spec = layer.spec;
        let _ = writeln!(s, "layer {} {} {}", spec.in_dim, spec.out_dim, spec.activation.as_str());
        for k in 0..spec.in_dim {
            push_floats(&mut s, layer.row(k));
        }
        push_floats(&mut s, &layer.bias);
    }
    let mut h = Fnv1a::default();
    h.write(s.as_bytes());
    let _ = writeln!(s, "end {:016x}", h.finish());
    s.into_bytes()
}

fn push_floats(s: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v:.16e}");
    }
    s.push('\n');
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::ModelFormat(msg.into()))
}

pub fn deserialize(bytes: &[u8]) -> Result<ModelParams> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::ModelFormat("not utf-8".into()))?;
    let body_end = text
        .trim_end_matches('\n')
        .rfind('\n')
        .map(|i| i + 1)
        .ok_or_else(|| Error::ModelFormat("truncated model".into()))?;
    let (body, trailer) = text.split_at(body_end);
    let header = body.lines().next().unwrap_or_default();
    let mut htoks = header.split_ascii_whitespace();
    if htoks.next() != Some(MAGIC) {
        return fmt_err("missing mgmodel header");
    }
    match htoks.next() {
        Some(VERSION) => {}
        Some(v) => return fmt_err(format!("version mismatch: expected {VERSION}, found {v}")),
        None => return fmt_err("missing version"),
    }
    let expected = trailer
        .trim_end()
        .strip_prefix("end ")
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| Error::ModelFormat("missing checksum trailer".into()))?;
    let mut h = Fnv1a::default();
    h.write(body.as_bytes());
    if h.finish() != expected {
        return fmt_err("checksum mismatch");
    }

    let head_name = htoks.next().unwrap_or_default();
    let temperature: f64 = parse_tok(htoks.next(), "temperature")?;
    let n_layers: usize = parse_tok(htoks.next(), "layer count")?;
    let space_id = htoks
        .next()
        .and_then(|t| u64::from_str_radix(t, 16).ok())
        .ok_or_else(|| Error::ModelFormat("invalid feature space checksum".into()))?;
    let head = match head_name {
        "sigmoid_single" => HeadKind::SigmoidSingle,
        "softmax_pair" => HeadKind::SoftmaxPair { temperature },
        other => return fmt_err(format!("unknown head '{other}'")),
    };

    let mut lines = body.lines().skip(1);
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let dims = lines.next().ok_or_else(|| Error::ModelFormat("missing layer line".into()))?;
        let mut t = dims.split_ascii_whitespace();
        if t.next() != Some("layer") {
            return fmt_err("expected layer line");
        }
        let in_dim: usize = parse_tok(t.next(), "in_dim")?;
        let out_dim: usize = parse_tok(t.next(), "out_dim")?;
        let activation = t
            .next()
            .and_then(Activation::parse)
            .ok_or_else(|| Error::ModelFormat("unknown activation".into()))?;
        let mut weights = Vec::with_capacity(in_dim * out_dim);
        for _ in 0..in_dim {
            read_floats(lines.next(), out_dim, &mut weights)?;
        }
        let mut bias = Vec::with_capacity(out_dim);
        read_floats(lines.next(), out_dim, &mut bias)?;
        layers.push(
            Layer::new(LayerSpec::new(in_dim, out_dim, activation), weights, bias)
                .map_err(|e| Error::ModelFormat(e.to_string()))?,
        );
    }
    if lines.next().is_some() {
        return fmt_err("trailing data after last layer");
    }
    ModelParams::new(layers, head, space_id).map_err(|e| Error::ModelFormat(e.to_string()))
}

fn parse_tok<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::ModelFormat(format!("invalid {what}")))
}

fn read_floats(line: Option<&str>, n: usize, out: &mut Vec<f64>) -> Result<()> {
    let line = line.ok_or_else(|| Error::ModelFormat("truncated weights".into()))?;
    let before = out.len();
    for tok in line.split(' ') {
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::ModelFormat(format!("invalid float '{tok}'")))?;
        out.push(v);
    }
    if out.len() - before != n {
        return fmt_err(format!("expected {n} values, found {}", out.len() - before));
    }
    Ok(())
}
