mod oracle;

use pipewise_core::decimate::{bin_size, decimate};
use pipewise_core::rng::XorShift64Star;
use pipewise_core::segment::{Channel, StreamKind, StreamSegment};
use proptest::prelude::*;

fn random_segment(rng: &mut XorShift64Star) -> StreamSegment {
    let n = 1 + (rng.next_u64() % 200_000) as usize;
    let spike_every = 1 + (rng.next_u64() % 5000) as usize;
    let values = (0..n)
        .map(|i| {
            let v = rng.normal(0.0, 1.0);
            if i % spike_every == 0 {
                v * 50.0
            } else {
                v
            }
        })
        .collect();
    StreamSegment::regular("d", Channel::Vibration, StreamKind::Fast, 1_000, 2048, values)
}

#[test]
fn envelope_preserves_global_extrema() {
    let mut rng = XorShift64Star::new(10);
    for _ in 0..100 {
        let seg = random_segment(&mut rng);
        let n_points = 1 + (rng.next_u64() % 5000) as usize;
        let s = decimate(&seg, "c", n_points);
        assert!(s.points.len() <= n_points);
        let lo = s.points.iter().map(|p| p.min).fold(f64::INFINITY, f64::min);
        let hi = s.points.iter().map(|p| p.max).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), oracle::extrema(&seg.values));
    }
}

proptest! {
    #[test]
    fn every_bin_is_the_extrema_of_its_samples(values in prop::collection::vec(-1e6f64..1e6, 1..3000), n_points in 1usize..400) {
        let seg = StreamSegment::regular("d", Channel::Current, StreamKind::Fast, 0, 128, values.clone());
        let s = decimate(&seg, "c", n_points);
        let size = bin_size(values.len(), n_points);
        prop_assert_eq!(s.points.len(), values.len().div_ceil(size));
        prop_assert_eq!(s.source_count, values.len());
        for (b, p) in s.points.iter().enumerate() {
            let chunk = &values[b * size..((b + 1) * size).min(values.len())];
            prop_assert_eq!((p.min, p.max), oracle::extrema(chunk));
            prop_assert_eq!(p.t_us, seg.timestamp(b * size));
        }
    }
}
