use std::collections::BTreeSet;

use pipewise_core::clean::{clean, CleanParams, CleanReport};
use pipewise_core::features::{catalog, extract_features, CycleSignals, FeatureVector, FEATURE_COUNT};
use pipewise_core::segment::{Channel, StreamKind, StreamSegment};
use pipewise_core::sim::{generate_cycle, ApplianceProfile, FaultMode, GeneratedCycle, SimConfig, BEARING_HZ};
use pipewise_core::spectrum::spectrum_features;
use proptest::prelude::*;

fn short_config(seed: u64) -> SimConfig {
    SimConfig { seed, duration_scale: 60.0 / 2820.0, ..SimConfig::default() }
}

fn cycle(fault: FaultMode, seed: u64) -> GeneratedCycle {
    generate_cycle(&ApplianceProfile::washing_machine(), &fault, &short_config(seed), "wm-01", 1_700_000_000_000_000).unwrap()
}

fn features_of(c: &GeneratedCycle) -> FeatureVector {
    let p = CleanParams::default();
    let (power, rp) = clean(&c.power, &p);
    let (current, rc) = clean(&c.current, &p);
    let (vibration, rv) = clean(&c.vibration, &p);
    let reports: [CleanReport; 3] = [rp.for_cycle("c"), rc.for_cycle("c"), rv.for_cycle("c")];
    extract_features(&CycleSignals {
        cycle_id: "c",
        start_us: c.start_us,
        end_us: c.end_us,
        power: &power,
        current: &current,
        vibration: &vibration,
        reports: [&reports[0], &reports[1], &reports[2]],
    })
    .unwrap()
}

#[test]
fn every_vector_has_79_unique_finite_features() {
    let names = catalog();
    assert_eq!(names.len(), FEATURE_COUNT);
    assert_eq!(names.iter().collect::<BTreeSet<_>>().len(), 79);
    for (i, fault) in [FaultMode::NONE, FaultMode::bearing(0.6), FaultMode::heating(0.9)].into_iter().enumerate() {
        let fv = features_of(&cycle(fault, i as u64));
        assert_eq!(fv.names, names);
        assert_eq!(fv.values.len(), 79);
        assert!(fv.values.iter().all(|v| v.is_finite()), "{:?}", fv.values);
        fv.validate().unwrap();
    }
}

#[test]
fn extraction_is_bit_for_bit_deterministic() {
    let a = features_of(&cycle(FaultMode::bearing(0.4), 5));
    let b = features_of(&cycle(FaultMode::bearing(0.4), 5));
    let bits = |v: &FeatureVector| v.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn bearing_energy_grows_with_severity() {
    let band_at_bearing = |severity: f64| {
        let c = cycle(FaultMode::bearing(severity), 3);
        let f = spectrum_features(&c.vibration.values, c.vibration.rate_hz as f64).unwrap();
        let edges = pipewise_core::spectrum::band_edges(c.vibration.rate_hz as f64);
        f.band_energies[pipewise_core::spectrum::band_of(BEARING_HZ, &edges).unwrap()]
    };
    let healthy = {
        let c = cycle(FaultMode::NONE, 3);
        let f = spectrum_features(&c.vibration.values, 2048.0).unwrap();
        let edges = pipewise_core::spectrum::band_edges(2048.0);
        f.band_energies[pipewise_core::spectrum::band_of(BEARING_HZ, &edges).unwrap()]
    };
    let mut prev = healthy;
    for s in [0.25, 0.5, 0.75, 1.0] {
        let e = band_at_bearing(s);
        assert!(e > prev, "severity {s}: {e} <= {prev}");
        prev = e;
    }
}

#[test]
fn heating_fault_stretches_heat_phase() {
    let healthy = cycle(FaultMode::NONE, 1);
    let faulty = cycle(FaultMode::heating(1.0), 1);
    let heat = |c: &GeneratedCycle| c.phases.iter().find(|(n, _)| n == "heat").unwrap().1;
    assert!(heat(&faulty) > heat(&healthy));
    assert!(faulty.end_us > healthy.end_us);
}

#[test]
fn simulator_output_is_seeded() {
    assert_eq!(cycle(FaultMode::NONE, 9), cycle(FaultMode::NONE, 9));
    assert_ne!(cycle(FaultMode::NONE, 9).vibration.values, cycle(FaultMode::NONE, 10).vibration.values);
    let c = cycle(FaultMode::NONE, 0);
    assert_eq!(c.current.len(), 60 * 2048);
    assert_eq!(c.power.len(), 60);
}

fn arb_slow() -> impl Strategy<Value = StreamSegment> {
    prop::collection::vec((0i64..400, -50.0f64..50.0, prop::bool::weighted(0.03)), 0..300).prop_map(|rows| {
        let ts = rows.iter().map(|r| r.0 * 1_000_000).collect();
        let values = rows.iter().map(|r| if r.2 { r.1 * 1e4 } else { r.1 }).collect();
        let mut s = StreamSegment::regular("d", Channel::Power, StreamKind::Slow, 0, 1, values);
        s.explicit_timestamps = Some(ts);
        s
    })
}

fn arb_fast() -> impl Strategy<Value = StreamSegment> {
    prop::collection::vec(prop_oneof![9 => -1.0f64..1.0, 1 => -1e3f64..1e3, 1 => Just(0.0)], 0..2000)
        .prop_map(|v| StreamSegment::regular("d", Channel::Vibration, StreamKind::Fast, 5, 128, v))
}

proptest! {
    #[test]
    fn clean_is_idempotent(seg in prop_oneof![arb_slow(), arb_fast()]) {
        let p = CleanParams::default();
        let (once, r1) = clean(&seg, &p);
        let (twice, r2) = clean(&once, &p);
        prop_assert_eq!(&once.values, &twice.values);
        prop_assert_eq!(once.timestamps(), twice.timestamps());
        prop_assert_eq!(r2.duplicates_removed, 0);
        prop_assert_eq!(r2.outliers_clipped, 0);
        prop_assert_eq!(&r1.gaps, &r2.gaps);
        prop_assert_eq!(r1.samples_out + r1.duplicates_removed, seg.len());
        let ts = once.timestamps();
        prop_assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }
}
