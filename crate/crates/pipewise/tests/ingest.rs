mod common;

use std::collections::{BTreeMap, HashSet};
use std::time::Duration;

use common::ingest_cycle;
use pipewise::ingest::{IngestConfig, IngestService, RetryPolicy};
use pipewise::messaging::{Bus, Endpoint, LocalBroker};
use pipewise::sim::{publish_cycle, PublishOptions};
use pipewise_core::broker::BrokerConfig;
use pipewise_core::segment::Channel;
use pipewise_core::sim::{generate_cycle, ApplianceProfile, FaultMode, SimConfig};

#[test]
fn reconnect_keeps_every_sample_once() {
    let dir = tempfile::tempdir().unwrap();
    let out = ingest_cycle(dir.path(), None, Some(40));
    assert_eq!(out.expected_current, 122_880);
    assert_eq!(out.stored[&Channel::Current], 122_880);
    assert_eq!(out.stored[&Channel::Vibration], 122_880);
    assert_eq!(out.stored[&Channel::Power], 60);
    assert_eq!(out.summary.reconnects, 1);
    assert_eq!(out.summary.samples, 122_880 * 2 + 60);
}

#[test]
fn several_reconnect_points_conserve() {
    for k in [1, 7, 31, 32, 33, 64, 65, 150, 299] {
        let dir = tempfile::tempdir().unwrap();
        let out = ingest_cycle(dir.path(), None, Some(k));
        assert_eq!(out.stored[&Channel::Current], 122_880, "sever after {k}");
        assert_eq!(out.stored[&Channel::Power], 60, "sever after {k}");
    }
}

fn start(dir: &std::path::Path, allow: Option<HashSet<String>>) -> (LocalBroker, IngestService) {
    let broker = LocalBroker::new(BrokerConfig::default());
    let ingest = IngestService::start(IngestConfig {
        raw_root: dir.join("raw"),
        mqtt_addr: "127.0.0.1:0".into(),
        http_addr: "127.0.0.1:0".into(),
        broker: Endpoint::Local(broker.clone()),
        allow,
        retry: RetryPolicy { attempts: 2, initial_backoff: Duration::from_millis(10), max_backoff: Duration::from_millis(20) },
    })
    .unwrap();
    (broker, ingest)
}

fn short_cycle(device: &str) -> pipewise_core::sim::GeneratedCycle {
    let config = SimConfig { seed: 3, duration_scale: 10.0 / 2820.0, fast_rate_hz: 256, ..SimConfig::default() };
    generate_cycle(&ApplianceProfile::washing_machine(), &FaultMode::NONE, &config, device, 1_000_000_000).unwrap()
}

#[test]
fn raw_query_and_notify() {
    let dir = tempfile::tempdir().unwrap();
    let (broker, ingest) = start(dir.path(), None);
    let cycle = short_cycle("wm-02");
    let base = format!("http://{}", ingest.http_addr());
    let opts = PublishOptions {
        mqtt_addr: ingest.mqtt_addr().to_string(),
        client_id: "t".into(),
        notify_url: Some(base.clone()),
        pace: None,
        window: 8,
        sever_after: None,
    };
    let sub = broker.consume("q.raw", 1);
    let summary = publish_cycle(&cycle, "wm-02-c", &opts).unwrap();
    assert!(summary.notified.is_some());

    let resp = ureq::get(&format!("{base}/raw/wm-02/current?from_us={}&to_us={}", cycle.start_us, cycle.end_us)).call().unwrap();
    assert_eq!(resp.header("X-Rate-Hz"), Some("256"));
    assert_eq!(resp.header("X-Stream-Kind"), Some("fast"));
    let body = resp.into_string().unwrap();
    assert_eq!(body.lines().count(), cycle.current.values.len());

    // Half-open window keeps the first half second only.
    let half = ureq::get(&format!("{base}/raw/wm-02/current?from_us={}&to_us={}", cycle.start_us, cycle.start_us + 500_000))
        .call()
        .unwrap()
        .into_string()
        .unwrap();
    assert_eq!(half.lines().count(), 128);

    let status = |url: &str| match ureq::get(url).call() {
        Ok(r) => r.status(),
        Err(ureq::Error::Status(s, _)) => s,
        Err(e) => panic!("{e}"),
    };
    assert_eq!(status(&format!("{base}/raw/nobody/current?from_us=0&to_us=1")), 404);
    assert_eq!(status(&format!("{base}/raw/wm-02/humidity?from_us=0&to_us=1")), 400);
    assert_eq!(status(&format!("{base}/raw/wm-02/current?from_us=5&to_us=5")), 400);
    assert_eq!(status(&format!("{base}/raw/wm-02/current?from_us=x&to_us=5")), 400);

    let bad = ureq::post(&format!("{base}/notify")).send_string("{not json");
    assert!(matches!(bad, Err(ureq::Error::Status(400, _))));

    // The notification landed on the first pipeline queue, if declared.
    if let Ok(sub) = sub {
        let m = sub.recv_timeout(Duration::from_secs(2)).unwrap().unwrap();
        let v: serde_json::Value = serde_json::from_slice(&m.payload).unwrap();
        assert_eq!(v["cycle_id"], "wm-02-c");
    }
}

#[test]
fn unknown_devices_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let allow: HashSet<String> = ["wm-ok".to_string()].into();
    let (_broker, ingest) = start(dir.path(), Some(allow));
    let cycle = short_cycle("wm-evil");
    let opts = PublishOptions {
        mqtt_addr: ingest.mqtt_addr().to_string(),
        client_id: "evil".into(),
        notify_url: None,
        pace: None,
        window: 8,
        sever_after: None,
    };
    let err = publish_cycle(&cycle, "x", &opts).unwrap_err();
    assert!(format!("{err:#}").contains("refused"), "{err:#}");
    assert!(!ingest.store.has_device("wm-evil"));

    // An allowed client gets through.
    let ok = short_cycle("wm-ok");
    publish_cycle(&ok, "y", &PublishOptions { client_id: "wm-ok".into(), ..opts }).unwrap();
    assert_eq!(ingest.store.sample_count("wm-ok", Channel::Current), ok.current.values.len());
}

#[test]
fn raw_store_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cycle = short_cycle("wm-03");
    {
        let (_b, ingest) = start(dir.path(), None);
        let opts = PublishOptions {
            mqtt_addr: ingest.mqtt_addr().to_string(),
            client_id: "r".into(),
            notify_url: None,
            pace: None,
            window: 4,
            sever_after: Some(3),
        };
        publish_cycle(&cycle, "c", &opts).unwrap();
        ingest.mqtt.shutdown();
    }
    let (_b, ingest) = start(dir.path(), None);
    let counts: BTreeMap<Channel, usize> = [Channel::Power, Channel::Current, Channel::Vibration]
        .into_iter()
        .map(|c| (c, ingest.store.sample_count("wm-03", c)))
        .collect();
    assert_eq!(counts[&Channel::Current], cycle.current.values.len());
    assert_eq!(counts[&Channel::Vibration], cycle.vibration.values.len());
    assert_eq!(counts[&Channel::Power], cycle.power.values.len());
}
