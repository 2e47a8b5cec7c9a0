//! Enable-only greedy gradient attack restricted to manifest features.
//!
//! Each iteration differentiates `p_malware` (temperature 1) with respect to
//! the input, picks the absent manifest feature with the most negative
//! gradient (lowest index on ties), and switches it on. The loop stops when
//! the model calls the sample benign, when the iteration budget runs out, or
//! (optionally) when no candidate has a strictly negative gradient.

use std::fmt;

use rayon::prelude::*;

use crate::dataset::{FeatureSpace, Label, Sample};
use crate::error::{param, Result};
use crate::network::{classify, input_gradient_at, predict, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackConfig {
    pub max_iterations: usize,
    pub require_negative_gradient: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            require_negative_gradient: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return param("max_iterations must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub original: Sample,
    pub perturbed: Sample,
    /// Features switched on, in the order they were chosen.
    pub enabled_features: Vec<usize>,
    pub iterations_used: usize,
    pub success: bool,
    /// Stopped because no absent manifest feature had a negative gradient.
    pub early_stop: bool,
}

fn check_space(m: &ModelParams, space: &FeatureSpace) -> Result<()> {
    if m.feature_space_id() != space.checksum() || m.n_features() != space.n_features() {
        return param("model was not built for this feature space");
    }
    Ok(())
}

pub fn craft(m: &ModelParams, x: &Sample, space: &FeatureSpace, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    check_space(m, space)?;
    if x.label() != Label::Malware {
        return param("attack targets malware samples only");
    }
    if predict(m, x) != Label::Malware {
        return param("attack targets samples the model detects as malware");
    }
    Ok(craft_unchecked(m, x, space, cfg))
}

fn craft_unchecked(m: &ModelParams, x: &Sample, space: &FeatureSpace, cfg: &AttackConfig) -> AttackResult {
    let mut current = x.clone();
    let mut enabled = Vec::new();
    let mut candidates: Vec<usize> = space.manifest_indices().into_iter().filter(|&f| !x.contains(f)).collect();
    let mut success = false;
    let mut early_stop = false;

    for _ in 0..cfg.max_iterations {
        if candidates.is_empty() {
            early_stop = true;
            break;
        }
        let (_, grad) = input_gradient_at(m, &current, &candidates);
        // Candidates are ascending, so strict `<` keeps the lowest index on ties.
        let mut best = 0;
        for (i, g) in grad.iter().enumerate() {
            if *g < grad[best] {
                best = i;
            }
        }
        if cfg.require_negative_gradient && grad[best] >= 0.0 {
            early_stop = true;
            break;
        }
        let feature = candidates.remove(best);
        current.enable(feature);
        enabled.push(feature);
        if predict(m, &current) == Label::Benign {
            success = true;
            break;
        }
    }
    AttackResult {
        original: x.clone(),
        iterations_used: enabled.len(),
        perturbed: current,
        enabled_features: enabled,
        success,
        early_stop,
    }
}

/// Attack outcome over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSummary {
    /// Successful crafts over detected malware; 0 when nothing was detected.
    pub rate: f64,
    pub n_detected: usize,
    pub n_success: usize,
    /// Set when no sample qualified, making the rate degenerate.
    pub empty: bool,
    /// One entry per detected malware sample, in input order, with its position in the input.
    pub results: Vec<(usize, AttackResult)>,
}

/// Misclassification rate: of the malware samples the model detects, the
/// fraction the attack turns benign within the budget.
pub fn misclassification_rate(
    m: &ModelParams,
    samples: &[Sample],
    space: &FeatureSpace,
    cfg: &AttackConfig,
) -> Result<AttackSummary> {
    cfg.validate()?;
    check_space(m, space)?;
    let results: Vec<(usize, AttackResult)> = samples
        .par_iter()
        .enumerate()
        .filter(|(_, s)| s.label() == Label::Malware && predict(m, s) == Label::Malware)
        .map(|(i, s)| (i, craft_unchecked(m, s, space, cfg)))
        .collect();
    let n_detected = results.len();
    let n_success = results.iter().filter(|(_, r)| r.success).count();
    Ok(AttackSummary {
        rate: if n_detected == 0 { 0.0 } else { n_success as f64 / n_detected as f64 },
        n_detected,
        n_success,
        empty: n_detected == 0,
        results,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSummary {
    /// Fraction of source-successful perturbations the target calls benign.
    pub rate: f64,
    pub n_source_success: usize,
    pub n_transferred: usize,
    pub source: AttackSummary,
}

/// Crafts on `source`, then replays the successful perturbations against `target`.
pub fn transfer_rate(
    source: &ModelParams,
    target: &ModelParams,
    samples: &[Sample],
    space: &FeatureSpace,
    cfg: &AttackConfig,
) -> Result<TransferSummary> {
    check_space(target, space)?;
    let summary = misclassification_rate(source, samples, space, cfg)?;
    let successes: Vec<&AttackResult> = summary.results.iter().map(|(_, r)| r).filter(|r| r.success).collect();
    let n_transferred = successes
        .iter()
        .filter(|r| classify(crate::network::p_malware(target, &r.perturbed)) == Label::Benign)
        .count();
    let n = successes.len();
    Ok(TransferSummary {
        rate: if n == 0 { 0.0 } else { n_transferred as f64 / n as f64 },
        n_source_success: n,
        n_transferred,
        source: summary,
    })
}

/// Line-oriented attack report, one line per attacked sample.
pub struct AttackReport<'a>(pub &'a AttackSummary);

impl fmt::Display for AttackReport<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (id, r) in &self.0.results {
            let added = if r.enabled_features.is_empty() {
                "-".to_string()
            } else {
                r.enabled_features.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            writeln!(
                f,
                "sample {id} success {} iters {} added {added}",
                r.success as u8, r.iterations_used
            )?;
        }
        Ok(())
    }
}
