use monoguard::{generate_synthetic, Label, SynthSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Target density 48 active features per sample, within 10%.
const DENSITY_LO: f64 = 43.2;
const DENSITY_HI: f64 = 52.8;

#[test]
fn desk_corpus_has_the_requested_shape() {
    let d = generate_synthetic(&SynthSpec::default()).unwrap();
    assert_eq!(d.len(), 20_000);
    assert_eq!(d.space().n_features(), 5_000);
    let density = d.mean_density();
    assert!((DENSITY_LO..=DENSITY_HI).contains(&density), "density {density}");
    let mal = d.count(Label::Malware) as f64 / d.len() as f64;
    assert!((0.06..=0.10).contains(&mal), "malware fraction {mal}");
    let manifest = d.space().n_manifest() as f64 / 5_000.0;
    assert!((0.5..=0.6).contains(&manifest), "manifest fraction {manifest}");
}

#[test]
fn desk_batches_hold_exactly_300_malware() {
    let d = generate_synthetic(&SynthSpec::default()).unwrap();
    let (train, _) = d.split(0.2, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let b = train.sample_batch(1000, 0.3, &mut rng).unwrap();
        assert_eq!(b.len(), 1000);
        assert_eq!(b.iter().filter(|s| s.label() == Label::Malware).count(), 300);
    }
}
