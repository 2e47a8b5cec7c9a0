// Exhaustive-search oracle for the enable-only attack on tiny instances.

use monoguard::attack::{craft, AttackConfig};
use monoguard::network::{classify, p_malware, Activation, HeadKind, Layer, LayerSpec, ModelParams};
use monoguard::{FeatureSpace, Label, Sample};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct Instance {
    pub model: ModelParams,
    pub space: FeatureSpace,
    pub x: Sample,
}

impl Instance {
    /// Manifest features that are currently off (the attacker's candidates).
    pub fn candidates(&self) -> Vec<usize> {
        (0..self.space.n_features())
            .filter(|&k| self.space.is_manifest(k) && !self.x.contains(k))
            .collect()
    }
}

/// A detected-malware instance with at most 12 disabled manifest features.
///
/// `hidden = 0` gives a single-layer net; otherwise one ReLU layer of that width.
pub fn random_instance(i: usize, seed: u64, hidden: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(i as u64));
    loop {
        let n = rng.gen_range(6..=16);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_manifest = rng.gen_range(2..=n.min(12));
        let space = FeatureSpace::from_manifest_indices(n, &order[..n_manifest]).unwrap();
        let head = if i % 2 == 0 { HeadKind::SigmoidSingle } else { HeadKind::softmax(1.0) };
        let w = Normal::new(0.0, 1.0).unwrap();
        let mut dims = vec![n];
        if hidden > 0 {
            dims.push(hidden);
        }
        dims.push(head.outputs());
        let layers: Vec<Layer> = (0..dims.len() - 1)
            .map(|l| {
                let act = if l + 2 < dims.len() { Activation::Relu } else { Activation::Identity };
                let spec = LayerSpec::new(dims[l], dims[l + 1], act);
                let weights = (0..dims[l] * dims[l + 1]).map(|_| w.sample(&mut rng)).collect();
                let bias = (0..dims[l + 1]).map(|_| 0.5 * w.sample(&mut rng)).collect();
                Layer::new(spec, weights, bias).unwrap()
            })
            .collect();
        let model = ModelParams::new(layers, head, space.checksum()).unwrap();
        let enabled: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.4)).collect();
        let x = Sample::new(enabled, Label::Malware);
        let inst = Instance { model, space, x };
        if !inst.candidates().is_empty() && classify(p_malware(&inst.model, &inst.x)) == Label::Malware {
            return inst;
        }
    }
}

fn p_with(inst: &Instance, extra: &[usize]) -> f64 {
    let mut x = inst.x.clone();
    for &k in extra {
        x.enable(k);
    }
    p_malware(&inst.model, &x)
}

/// Smallest number of enables (up to `max_flips`) that makes the sample benign.
pub fn brute_force_min_flips(inst: &Instance, max_flips: usize) -> Option<usize> {
    let c = inst.candidates();
    fn search(inst: &Instance, c: &[usize], start: usize, chosen: &mut Vec<usize>, left: usize) -> bool {
        if classify(p_with(inst, chosen)) == Label::Benign {
            return true;
        }
        if left == 0 {
            return false;
        }
        for i in start..c.len() {
            chosen.push(c[i]);
            let hit = search(inst, c, i + 1, chosen, left - 1);
            chosen.pop();
            if hit {
                return true;
            }
        }
        false
    }
    (1..=max_flips).find(|&k| search(inst, &c, 0, &mut Vec::new(), k))
}

/// The single enable minimizing `p_malware`; ties go to the lowest index.
pub fn best_single_flip(inst: &Instance) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for k in inst.candidates() {
        let p = p_with(inst, &[k]);
        if best.map_or(true, |(_, bp)| p < bp) {
            best = Some((k, p));
        }
    }
    best.unwrap().0
}

#[derive(Debug, Default)]
pub struct Tally {
    pub instances: usize,
    pub oracle_successes: usize,
    pub greedy_misses: Vec<usize>,
    pub first_pick_checked: usize,
    pub first_pick_mismatches: Vec<usize>,
}

/// Compares greedy craft against the oracles on `n` instances.
///
/// The first-pick comparison applies whenever craft made a pick.
pub fn compare(n: usize, seed: u64, hidden: usize) -> Tally {
    let cfg = AttackConfig::default();
    let mut t = Tally::default();
    for i in 0..n {
        let inst = random_instance(i, seed, hidden);
        let r = craft(&inst.model, &inst.x, &inst.space, &cfg).unwrap();
        t.instances += 1;
        if brute_force_min_flips(&inst, 3).is_some() {
            t.oracle_successes += 1;
            if !r.success {
                t.greedy_misses.push(i);
            }
        }
        if let Some(&first) = r.enabled_features.first() {
            t.first_pick_checked += 1;
            if first != best_single_flip(&inst) {
                t.first_pick_mismatches.push(i);
            }
        }
    }
    t
}
