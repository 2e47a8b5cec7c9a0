// Property checks of N1/N2 against their piecewise definitions.

use monoguard::constraints::{n1, n1_grad, n2, n2_grad};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reals spanning many magnitudes of both signs, with exact zeros mixed in.
pub fn draw_reals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| match i % 10 {
            0 => 0.0,
            1 => -0.0,
            _ => {
                let mag = 10f64.powf(rng.gen_range(-12.0..6.0));
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            }
        })
        .collect()
}

/// Returns the number of reals checked, or the first violation.
pub fn check(n: usize, seed: u64) -> Result<usize, String> {
    for x in draw_reals(n, seed) {
        let (want1, want2) = if x >= 0.0 { (0.0, 0.0) } else { (x.abs(), x * x) };
        if n1(x) != want1 || n2(x) != want2 {
            return Err(format!("definition mismatch at {x:e}: n1 {} n2 {}", n1(x), n2(x)));
        }
        if x >= 0.0 && (n1(x) != 0.0 || n2(x) != 0.0 || n1_grad(x) != 0.0 || n2_grad(x) != 0.0) {
            return Err(format!("non-zero on non-negative {x:e}"));
        }
        if x < 0.0 && (n1_grad(x) != -1.0 || n2_grad(x) != 2.0 * x) {
            return Err(format!("derivative mismatch at {x:e}"));
        }
        if n1(x) < 0.0 || n2(x) < 0.0 {
            return Err(format!("negative penalty at {x:e}"));
        }
    }
    // n2' is continuous at 0: both one-sided limits are 0.
    for h in [1e-1, 1e-3, 1e-6, 1e-9, 1e-12] {
        if n2_grad(-h).abs() > 2.0 * h || n2_grad(h) != 0.0 {
            return Err(format!("n2 derivative jumps near 0 (h = {h:e})"));
        }
        let central = (n2(h) - n2(-h)) / (2.0 * h);
        if (central - n2_grad(0.0)).abs() > h {
            return Err(format!("n2 central difference {central:e} at 0 disagrees with derivative"));
        }
    }
    Ok(n)
}
