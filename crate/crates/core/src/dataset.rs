//! Sparse boolean-feature corpora.
//!
//! A [`Dataset`] is a list of [`Sample`]s over a shared [`FeatureSpace`]. Each
//! sample stores only the indices of its enabled features, in strictly
//! increasing order. The feature space tags every feature as either
//! manifest-derived (the only features an attacker may switch on) or
//! code-derived.
//!
//! Synthetic corpora are generated from a planted-rule model: every rule names
//! two indicator features and one exculpating manifest feature, and samples
//! with both indicators but without the exculpating feature are mostly
//! malware. An unconstrained learner therefore profits from a negative weight
//! on the exculpating feature, which is exactly what an enable-only attack
//! exploits.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};

use crate::error::{param, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Benign,
    Malware,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malware => "malware",
        }
    }

    pub fn is_malware(self) -> bool {
        self == Label::Malware
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "malware" => Ok(Label::Malware),
            "benign" => Ok(Label::Benign),
            other => Err(format!("unknown label token '{other}'")),
        }
    }
}

/// Feature count plus the manifest/code tag of every feature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpace {
    n_features: usize,
    manifest_mask: Vec<bool>,
}

impl FeatureSpace {
    pub fn new(manifest_mask: Vec<bool>) -> Result<Self> {
        if manifest_mask.is_empty() {
            return param("feature space needs at least one feature");
        }
        if !manifest_mask.iter().any(|&m| m) {
            return param("feature space needs at least one manifest feature");
        }
        Ok(Self {
            n_features: manifest_mask.len(),
            manifest_mask,
        })
    }

    /// Builds a space whose manifest features are exactly `manifest`.
    pub fn from_manifest_indices(n_features: usize, manifest: &[usize]) -> Result<Self> {
        let mut mask = vec![false; n_features];
        for &i in manifest {
            if i >= n_features {
                return param(format!("manifest index {i} out of range for {n_features} features"));
            }
            mask[i] = true;
        }
        Self::new(mask)
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn manifest_mask(&self) -> &[bool] {
        &self.manifest_mask
    }

    pub fn is_manifest(&self, feature: usize) -> bool {
        self.manifest_mask[feature]
    }

    pub fn manifest_indices(&self) -> Vec<usize> {
        (0..self.n_features).filter(|&i| self.manifest_mask[i]).collect()
    }

    pub fn n_manifest(&self) -> usize {
        self.manifest_mask.iter().filter(|&&m| m).count()
    }

    /// FNV-1a over the feature count and mask; binds models to the space they were trained on.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::default();
        h.write(&(self.n_features as u64).to_le_bytes());
        for &m in &self.manifest_mask {
            h.write(&[m as u8]);
        }
        h.finish()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n_features {}", self.n_features)?;
        for i in self.manifest_indices() {
            writeln!(w, "manifest {i}")?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines().enumerate();
        let n_features = match lines.next() {
            Some((_, line)) => {
                let line = line?;
                let mut toks = line.split_ascii_whitespace();
                match (toks.next(), toks.next(), toks.next()) {
                    (Some("n_features"), Some(n), None) => n.parse::<usize>().map_err(|_| Error::Format {
                        line: 1,
                        msg: format!("invalid feature count '{n}'"),
                    })?,
                    _ => {
                        return Err(Error::Format {
                            line: 1,
                            msg: "expected 'n_features <N>'".into(),
                        })
                    }
                }
            }
            None => {
                return Err(Error::Format {
                    line: 1,
                    msg: "empty feature-space file".into(),
                })
            }
        };
        let mut mask = vec![false; n_features];
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            let mut toks = line.split_ascii_whitespace();
            match (toks.next(), toks.next(), toks.next()) {
                (Some("manifest"), Some(idx), None) => {
                    let idx = idx.parse::<usize>().map_err(|_| Error::Format {
                        line: lineno,
                        msg: format!("invalid index '{idx}'"),
                    })?;
                    if idx >= n_features {
                        return Err(Error::Format {
                            line: lineno,
                            msg: format!("manifest index {idx} out of range for {n_features} features"),
                        });
                    }
                    mask[idx] = true;
                }
                _ => {
                    return Err(Error::Format {
                        line: lineno,
                        msg: "expected 'manifest <idx>'".into(),
                    })
                }
            }
        }
        FeatureSpace::new(mask).map_err(|e| Error::Format {
            line: 1,
            msg: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(fs::File::open(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub(crate) fn write(&mut self, bytes: &[u8]) {
        if self.0 == 0 {
            self.0 = 0xcbf2_9ce4_8422_2325;
        }
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        if self.0 == 0 {
            0xcbf2_9ce4_8422_2325
        } else {
            self.0
        }
    }
}

/// A binary feature vector stored as its enabled indices, plus its label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sample {
    indices: Vec<usize>,
    label: Label,
}

impl Sample {
    /// Canonicalizes `indices` (sorts and removes duplicates).
    pub fn new(mut indices: Vec<usize>, label: Label) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices, label }
    }

    /// Accepts indices only if already strictly increasing.
    pub fn from_sorted(indices: Vec<usize>, label: Label) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return param("indices must be strictly increasing");
        }
        Ok(Self { indices, label })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, feature: usize) -> bool {
        self.indices.binary_search(&feature).is_ok()
    }

    /// Returns a copy with `feature` switched on.
    pub fn with_enabled(&self, feature: usize) -> Sample {
        let mut out = self.clone();
        out.enable(feature);
        out
    }

    pub fn enable(&mut self, feature: usize) {
        if let Err(pos) = self.indices.binary_search(&feature) {
            self.indices.insert(pos, feature);
        }
    }

    /// Dense 0/1 representation.
    pub fn to_dense(&self, n_features: usize) -> Vec<f64> {
        let mut x = vec![0.0; n_features];
        for &i in &self.indices {
            x[i] = 1.0;
        }
        x
    }

    fn max_index(&self) -> Option<usize> {
        self.indices.last().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
    Unsplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    space: Arc<FeatureSpace>,
    samples: Vec<Sample>,
    split_tag: SplitTag,
}

impl Dataset {
    pub fn new(space: Arc<FeatureSpace>, samples: Vec<Sample>, split_tag: SplitTag) -> Result<Self> {
        let n = space.n_features();
        if let Some(bad) = samples.iter().find(|s| s.max_index().is_some_and(|m| m >= n)) {
            return param(format!(
                "sample index {} out of range for {n} features",
                bad.max_index().unwrap_or_default()
            ));
        }
        Ok(Self {
            space,
            samples,
            split_tag,
        })
    }

    pub fn space(&self) -> &FeatureSpace {
        &self.space
    }

    pub fn space_arc(&self) -> Arc<FeatureSpace> {
        Arc::clone(&self.space)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    pub fn with_split_tag(mut self, tag: SplitTag) -> Self {
        self.split_tag = tag;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    pub fn malware(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.label.is_malware())
    }

    pub fn mean_density(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(Sample::len).sum::<usize>() as f64 / self.samples.len() as f64
    }

    /// Checks the batch-sampler precondition: both labels present.
    pub fn ensure_both_labels(&self) -> Result<()> {
        if self.count(Label::Malware) == 0 || self.count(Label::Benign) == 0 {
            return param("dataset must contain at least one malware and one benign sample");
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = String::new();
        for s in &self.samples {
            line.clear();
            line.push_str(s.label.as_str());
            for &i in &s.indices {
                line.push(' ');
                line.push_str(&i.to_string());
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    /// Parses the line format `<label> <idx> <idx> ...` against `space`.
    pub fn read_from<R: Read>(r: R, space: Arc<FeatureSpace>) -> Result<Self> {
        let n = space.n_features();
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let mut toks = line.split_ascii_whitespace();
            let label: Label = match toks.next() {
                Some(t) => t.parse().map_err(|msg| Error::Format { line: lineno, msg })?,
                None => {
                    return Err(Error::Format {
                        line: lineno,
                        msg: "empty line".into(),
                    })
                }
            };
            let mut indices = Vec::new();
            for tok in toks {
                let idx = tok.parse::<usize>().map_err(|_| Error::Format {
                    line: lineno,
                    msg: format!("invalid index '{tok}'"),
                })?;
                if idx >= n {
                    return Err(Error::Format {
                        line: lineno,
                        msg: format!("index {idx} out of range for {n} features"),
                    });
                }
                if indices.last().is_some_and(|&prev| prev >= idx) {
                    return Err(Error::Format {
                        line: lineno,
                        msg: format!("indices not strictly increasing at {idx}"),
                    });
                }
                indices.push(idx);
            }
            samples.push(Sample { indices, label });
        }
        Dataset::new(space, samples, SplitTag::Unsplit)
    }

    /// Loads a dataset file together with its feature-space file.
    pub fn load(data_path: impl AsRef<Path>, space_path: impl AsRef<Path>) -> Result<Self> {
        let space = Arc::new(FeatureSpace::load(space_path)?);
        Self::load_with_space(data_path, space)
    }

    pub fn load_with_space(data_path: impl AsRef<Path>, space: Arc<FeatureSpace>) -> Result<Self> {
        Self::read_from(fs::File::open(data_path)?, space)
    }

    pub fn save(&self, data_path: impl AsRef<Path>, space_path: impl AsRef<Path>) -> Result<()> {
        self.space.save(space_path)?;
        self.save_samples(data_path)
    }

    pub fn save_samples(&self, data_path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(data_path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Stratified split into `(train, test)`.
    ///
    /// Each label contributes `round(count * test_fraction)` samples to the
    /// test side; both sides keep the parent's sample order.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return param(format!("test_fraction must be in (0,1), got {test_fraction}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_test = vec![false; self.samples.len()];
        for label in [Label::Malware, Label::Benign] {
            let mut pool: Vec<usize> = (0..self.samples.len())
                .filter(|&i| self.samples[i].label == label)
                .collect();
            let n_test = (pool.len() as f64 * test_fraction).round() as usize;
            if n_test == 0 || n_test == pool.len() {
                return Err(Error::Split(format!(
                    "{} {label} samples cannot be split with test_fraction {test_fraction}",
                    pool.len()
                )));
            }
            pool.shuffle(&mut rng);
            for &i in &pool[..n_test] {
                in_test[i] = true;
            }
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (s, t) in self.samples.iter().zip(in_test) {
            if t {
                test.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        Ok((
            Dataset {
                space: self.space_arc(),
                samples: train,
                split_tag: SplitTag::Train,
            },
            Dataset {
                space: self.space_arc(),
                samples: test,
                split_tag: SplitTag::Test,
            },
        ))
    }

    /// Draws a ratio-controlled mini-batch, returned as positions into `samples()`.
    ///
    /// Exactly `round(batch_size * malware_ratio)` entries are malware. A label
    /// is drawn without replacement when its pool is large enough and with
    /// replacement otherwise.
    pub fn sample_batch_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        malware_ratio: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return param("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&malware_ratio) {
            return param(format!("malware_ratio must be in [0,1], got {malware_ratio}"));
        }
        let n_malware = (batch_size as f64 * malware_ratio).round() as usize;
        let n_benign = batch_size - n_malware;
        let (mut mal_pool, mut ben_pool) = (Vec::new(), Vec::new());
        for (i, s) in self.samples.iter().enumerate() {
            match s.label {
                Label::Malware => mal_pool.push(i),
                Label::Benign => ben_pool.push(i),
            }
        }
        let mut batch = Vec::with_capacity(batch_size);
        for (pool, need, label) in [
            (&mut mal_pool, n_malware, Label::Malware),
            (&mut ben_pool, n_benign, Label::Benign),
        ] {
            if need == 0 {
                continue;
            }
            if pool.is_empty() {
                return param(format!("batch needs {need} {label} samples but the pool is empty"));
            }
            if pool.len() >= need {
                let (picked, _) = pool.partial_shuffle(rng, need);
                batch.extend_from_slice(picked);
            } else {
                batch.extend((0..need).map(|_| pool[rng.gen_range(0..pool.len())]));
            }
        }
        Ok(batch)
    }

    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        malware_ratio: f64,
        rng: &mut R,
    ) -> Result<Vec<&Sample>> {
        Ok(self
            .sample_batch_indices(batch_size, malware_ratio, rng)?
            .into_iter()
            .map(|i| &self.samples[i])
            .collect())
    }

    /// Concatenates datasets over the same space (used to undo a split).
    pub fn merge(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Parameter("nothing to merge".into()))?;
        if parts.iter().any(|p| p.space != first.space) {
            return param("cannot merge datasets over different feature spaces");
        }
        Ok(Dataset {
            space: first.space_arc(),
            samples: parts.iter().flat_map(|p| p.samples.iter().cloned()).collect(),
            split_tag: SplitTag::Unsplit,
        })
    }
}

/// Parameters of the planted-rule synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_features: usize,
    pub manifest_fraction: f64,
    pub n_samples: usize,
    pub malware_fraction: f64,
    pub mean_density: f64,
    pub n_rules: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_features: 5_000,
            manifest_fraction: 0.55,
            n_samples: 20_000,
            malware_fraction: 0.08,
            mean_density: 48.0,
            n_rules: 40,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| x > 0.0 && x < 1.0;
        if self.n_features == 0 || self.n_samples == 0 {
            return param("n_features and n_samples must be positive");
        }
        if !frac(self.manifest_fraction) {
            return param(format!("manifest_fraction must be in (0,1), got {}", self.manifest_fraction));
        }
        if !frac(self.malware_fraction) {
            return param(format!("malware_fraction must be in (0,1), got {}", self.malware_fraction));
        }
        if !(self.mean_density > 0.0 && self.mean_density < self.n_features as f64) {
            return param(format!(
                "mean_density must be in (0, n_features), got {}",
                self.mean_density
            ));
        }
        Ok(())
    }
}

/// Two indicators plus one exculpating manifest feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedRule {
    pub indicators: [usize; 2],
    pub exculpating: usize,
}

// Generator knobs. Malware carry one or two rules; a slice of benign samples
// carry a full A,B,C rule instance so the indicators alone are ambiguous.
const MALWARE_SECOND_RULE_P: f64 = 0.3;
const MALWARE_EXCULPATING_NOISE_P: f64 = 0.05;
const BENIGN_RULE_P: f64 = 0.1;
const ZIPF_OFFSET: f64 = 10.0;
const LEAN_STD: f64 = 0.3;

/// Generates a corpus and returns the planted rules alongside it.
pub fn generate_synthetic_with_rules(spec: &SynthSpec) -> Result<(Dataset, Vec<PlantedRule>)> {
    spec.validate()?;
    let n = spec.n_features;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_manifest = ((n as f64 * spec.manifest_fraction).round() as usize).clamp(1, n);
    let mut mask = vec![false; n];
    for &i in &order[..n_manifest] {
        mask[i] = true;
    }
    let space = Arc::new(FeatureSpace::new(mask)?);

    let rules = plant_rules(&space, spec.n_rules, &mut rng);

    // Zipf-like popularity over a random ranking, tilted per class by a
    // log-normal lean so background features carry weak label evidence.
    order.shuffle(&mut rng);
    let lean_dist = Normal::new(0.0, LEAN_STD).expect("valid normal");
    let mut mal_w = vec![0.0; n];
    let mut ben_w = vec![0.0; n];
    for (rank, &f) in order.iter().enumerate() {
        let pop = 1.0 / (rank as f64 + ZIPF_OFFSET);
        let lean: f64 = lean_dist.sample(&mut rng);
        mal_w[f] = pop * lean.exp();
        ben_w[f] = pop * (-lean).exp();
    }
    let mal_dist = WeightedIndex::new(&mal_w).expect("positive weights");
    let ben_dist = WeightedIndex::new(&ben_w).expect("positive weights");

    let n_malware = (spec.n_samples as f64 * spec.malware_fraction).round() as usize;
    let mut labels: Vec<Label> = (0..spec.n_samples)
        .map(|i| if i < n_malware { Label::Malware } else { Label::Benign })
        .collect();
    labels.shuffle(&mut rng);

    let mal_rule_mean = if rules.is_empty() {
        0.0
    } else {
        2.0 * (1.0 + MALWARE_SECOND_RULE_P) * (1.0 + MALWARE_EXCULPATING_NOISE_P / 2.0)
    };
    let ben_rule_mean = if rules.is_empty() { 0.0 } else { 3.0 * BENIGN_RULE_P };

    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut buf = Vec::new();
    for label in labels {
        buf.clear();
        let (rule_mean, dist) = match label {
            Label::Malware => {
                if !rules.is_empty() {
                    let k = if rng.gen_bool(MALWARE_SECOND_RULE_P) { 2 } else { 1 };
                    for _ in 0..k {
                        let r = rules[rng.gen_range(0..rules.len())];
                        buf.extend_from_slice(&r.indicators);
                        if rng.gen_bool(MALWARE_EXCULPATING_NOISE_P) {
                            buf.push(r.exculpating);
                        }
                    }
                }
                (mal_rule_mean, &mal_dist)
            }
            Label::Benign => {
                if !rules.is_empty() && rng.gen_bool(BENIGN_RULE_P) {
                    let r = rules[rng.gen_range(0..rules.len())];
                    buf.extend_from_slice(&r.indicators);
                    buf.push(r.exculpating);
                }
                (ben_rule_mean, &ben_dist)
            }
        };
        let bg_mean = (spec.mean_density - rule_mean).max(0.0);
        let k = if bg_mean > 0.0 {
            Poisson::new(bg_mean).expect("positive mean").sample(&mut rng) as usize
        } else {
            0
        };
        draw_background(&mut buf, k, n, dist, &mut rng);
        samples.push(Sample::new(buf.clone(), label));
    }

    Ok((Dataset::new(space, samples, SplitTag::Unsplit)?, rules))
}

/// Deterministic planted-rule synthetic corpus.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    generate_synthetic_with_rules(spec).map(|(d, _)| d)
}

fn plant_rules(space: &FeatureSpace, n_rules: usize, rng: &mut ChaCha8Rng) -> Vec<PlantedRule> {
    let n = space.n_features();
    if n < 3 || n_rules == 0 {
        return Vec::new();
    }
    let mut manifest = space.manifest_indices();
    manifest.shuffle(rng);
    // Exculpating features come from the manifest pool; they are distinct
    // across rules while the pool lasts.
    let exculpating: Vec<usize> = (0..n_rules).map(|r| manifest[r % manifest.len()]).collect();
    let mut others: Vec<usize> = (0..n).filter(|i| !exculpating.contains(i)).collect();
    if others.len() < 2 {
        others = (0..n).collect();
    }
    others.shuffle(rng);
    let mut cursor = 0;
    let mut next = |avoid: &[usize]| loop {
        let f = others[cursor % others.len()];
        cursor += 1;
        if !avoid.contains(&f) {
            return f;
        }
    };
    exculpating
        .into_iter()
        .map(|c| {
            let a = next(&[c]);
            let b = next(&[c, a]);
            PlantedRule {
                indicators: [a, b],
                exculpating: c,
            }
        })
        .collect()
}

fn draw_background(
    buf: &mut Vec<usize>,
    k: usize,
    n: usize,
    dist: &WeightedIndex<f64>,
    rng: &mut ChaCha8Rng,
) {
    let target = (buf.len() + k).min(n);
    let mut seen: std::collections::HashSet<usize> = buf.iter().copied().collect();
    let mut attempts = 0usize;
    while seen.len() < target && attempts < 64 * (k + 1) {
        let f = dist.sample(rng);
        if seen.insert(f) {
            buf.push(f);
        }
        attempts += 1;
    }
    // Heavy-tailed popularity can stall rejection on tiny spaces; top up uniformly.
    while seen.len() < target {
        let f = rng.gen_range(0..n);
        if seen.insert(f) {
            buf.push(f);
        }
    }
}
