#[path = "support/penalty_props.rs"]
mod penalty_props;

use monoguard::constraints::{n1, n2, negative_mass, project_nonnegative, HardScope};
use monoguard::network::{init, Architecture, HeadKind, InitMode, InitScheme};
use proptest::prelude::*;

#[test]
fn penalties_match_piecewise_definitions_on_10k_reals() {
    assert_eq!(penalty_props::check(10_000, 1), Ok(10_000));
}

#[test]
fn sample_of_reals_reaches_both_signs_and_zero() {
    let xs = penalty_props::draw_reals(10_000, 1);
    assert!(xs.iter().any(|&x| x == 0.0));
    assert!(xs.iter().filter(|&&x| x < 0.0).count() > 3500);
    assert!(xs.iter().filter(|&&x| x > 0.0).count() > 3500);
}

proptest! {
    #[test]
    fn n1_is_one_homogeneous(x in -1e6f64..1e6, s in 0.0f64..100.0) {
        prop_assert!((n1(s * x) - s * n1(x)).abs() <= 1e-9 * (1.0 + s * x.abs()));
    }

    #[test]
    fn n2_is_square_of_n1(x in -1e6f64..1e6) {
        prop_assert_eq!(n2(x), n1(x) * n1(x));
    }

    #[test]
    fn projection_removes_all_negative_mass(seed in 0u64..500, h in 1usize..6) {
        let arch = Architecture::new(vec![h, h], HeadKind::SigmoidSingle);
        let m = init(&arch.layer_specs(7), arch.head, InitMode::new(InitScheme::GlorotNormal, seed), 0).unwrap();
        let p = project_nonnegative(&m, HardScope::AllWeights, None).unwrap();
        prop_assert_eq!(negative_mass(&p), 0.0);
        for (a, b) in m.layers().iter().zip(p.layers()) {
            prop_assert_eq!(a.bias(), b.bias());
            for (w, pw) in a.weights().iter().zip(b.weights()) {
                prop_assert_eq!(*pw, w.max(0.0));
            }
        }
    }
}
