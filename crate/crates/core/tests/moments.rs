mod oracle;

use pipewise_core::moments::{excess_kurtosis, skewness, TimeStats};
use pipewise_core::rng::XorShift64Star;
use proptest::prelude::*;

/// Arrays of mixed shape: uniform, exponential (skewed) and heavy-tailed.
fn random_array(rng: &mut XorShift64Star) -> Vec<f64> {
    let n = 1 + (rng.next_u64() % 4096) as usize;
    let shape = rng.next_u64() % 3;
    let offset = rng.uniform(-100.0, 100.0);
    let scale = 10f64.powf(rng.uniform(-3.0, 3.0));
    (0..n)
        .map(|_| {
            let u = rng.next_f64().max(1e-300);
            let z = match shape {
                0 => u,
                1 => -u.ln(),
                _ => rng.normal(0.0, 1.0) / (0.05 + u),
            };
            offset + scale * z
        })
        .collect()
}

#[test]
fn moments_match_brute_force() {
    let mut rng = XorShift64Star::new(20240611);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = random_array(&mut rng);
        let (s, k) = (skewness(&x).unwrap(), excess_kurtosis(&x).unwrap());
        match oracle::shape(&x) {
            None => assert_eq!((s, k), (0.0, 0.0)),
            Some((ws, wk)) => {
                // Two-sample arrays are exactly symmetric; compare absolutely.
                if x.len() == 2 {
                    assert!(s.abs() < 1e-12, "{s}");
                } else {
                    worst = worst.max(oracle::rel_err(s, ws));
                }
                worst = worst.max(oracle::rel_err(k, wk));
            }
        }
    }
    eprintln!("moments: worst relative error {worst:e}");
    assert!(worst <= 1e-12, "worst relative error {worst:e}");
}

#[test]
fn constant_input_has_zero_shape() {
    for n in [1, 2, 17, 4096] {
        let x = vec![3.25; n];
        assert_eq!(skewness(&x).unwrap(), 0.0);
        assert_eq!(excess_kurtosis(&x).unwrap(), 0.0);
    }
    assert!(skewness(&[]).is_err());
}

#[test]
fn time_stats_agree_with_brute_force() {
    let x: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 - 20.0).collect();
    let st = TimeStats::compute(&x).unwrap();
    let (lo, hi) = oracle::extrema(&x);
    assert_eq!((st.min, st.max), (lo, hi));
    let mean = oracle::ksum(x.iter().copied()) / 1000.0;
    assert!((st.mean - mean).abs() < 1e-12);
    let rms = (oracle::ksum(x.iter().map(|v| v * v)) / 1000.0).sqrt();
    assert!(oracle::rel_err(st.rms, rms) < 1e-12);
}

proptest! {
    #[test]
    fn shape_is_shift_and_scale_invariant(
        seed in any::<u64>(),
        shift in -1e3f64..1e3,
        log_scale in -3f64..3.0,
        negate in any::<bool>(),
    ) {
        let mut rng = XorShift64Star::new(seed);
        let n = 3 + (seed % 2000) as usize;
        let x: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0) + 0.5 * rng.next_f64().powi(3)).collect();
        let a = 10f64.powf(log_scale) * if negate { -1.0 } else { 1.0 };
        let y: Vec<f64> = x.iter().map(|v| a * v + shift).collect();
        let (s0, k0) = (skewness(&x).unwrap(), excess_kurtosis(&x).unwrap());
        let (s1, k1) = (skewness(&y).unwrap(), excess_kurtosis(&y).unwrap());
        prop_assert!((s1 - a.signum() * s0).abs() <= 1e-9, "skew {s0} vs {s1}");
        prop_assert!((k1 - k0).abs() <= 1e-9, "kurt {k0} vs {k1}");
    }
}
