use std::collections::{BTreeMap, BTreeSet, VecDeque};

use pipewise_core::broker::{dead_letter_queue, Broker, BrokerConfig, BrokerError};
use proptest::prelude::*;

fn broker() -> Broker {
    Broker::new(BrokerConfig::default())
}

fn publish(b: &mut Broker, q: &str, body: &[u8], now: u64) -> String {
    b.publish(q, body.to_vec(), BTreeMap::new(), now).unwrap()
}

#[test]
fn declare_is_idempotent_and_validated() {
    let mut b = broker();
    let s = b.declare_queue("q.clean", 0).unwrap();
    assert_eq!((s.depth, s.consumer_count), (0, 0));
    publish(&mut b, "q.clean", b"x", 1);
    assert_eq!(b.declare_queue("q.clean", 2).unwrap().depth, 1);
    assert_eq!(b.declare_queue("Q Clean!", 0), Err(BrokerError::InvalidName("Q Clean!".into())));
    assert!(b.declare_queue(&"a".repeat(129), 0).is_err());
    assert!(b.declare_queue(&"a".repeat(128), 0).is_ok());
}

#[test]
fn publish_errors() {
    let mut b = Broker::new(BrokerConfig { max_payload: 4, ..Default::default() });
    assert_eq!(b.publish("nope", vec![], BTreeMap::new(), 0), Err(BrokerError::UnknownQueue("nope".into())));
    b.declare_queue("q", 0).unwrap();
    assert!(matches!(b.publish("q", vec![0; 5], BTreeMap::new(), 0), Err(BrokerError::PayloadTooLarge { size: 5, max: 4 })));
    for _ in 0..3 {
        publish(&mut b, "q", b"ok", 0);
    }
    assert_eq!(b.queue_stats("q", 0).unwrap().depth, 3);
    assert_eq!(b.consume("nope", 1, 0), Err(BrokerError::UnknownQueue("nope".into())));
    assert_eq!(b.consume("q", 0, 0), Err(BrokerError::InvalidPrefetch));
}

#[test]
fn payload_round_trips() {
    let mut b = broker();
    b.declare_queue("q", 0).unwrap();
    let body: Vec<u8> = (0..=255).collect();
    let mut h = BTreeMap::new();
    h.insert("k".to_string(), "v".to_string());
    let id = b.publish("q", body.clone(), h.clone(), 0).unwrap();
    b.consume("q", 1, 0).unwrap();
    let d = b.take_deliveries();
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].message.msg_id, id);
    assert_eq!(d[0].message.payload, body);
    assert_eq!(d[0].message.headers, h);
    assert_eq!(d[0].message.delivery_count, 1);
}

#[test]
fn round_robin_two_consumers() {
    let mut b = broker();
    b.declare_queue("q", 0).unwrap();
    let c1 = b.consume("q", 1, 0).unwrap();
    let c2 = b.consume("q", 1, 0).unwrap();
    let mut got: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..4 {
        publish(&mut b, "q", &[i], 0);
        for d in b.take_deliveries() {
            *got.entry(d.consumer_id.clone()).or_default() += 1;
            b.ack(&d.consumer_id, &d.message.msg_id, 0).unwrap();
        }
    }
    assert_eq!(got[&c1], 2);
    assert_eq!(got[&c2], 2);
}

#[test]
fn prefetch_bounds_outstanding() {
    let mut b = broker();
    b.declare_queue("q", 0).unwrap();
    b.consume("q", 2, 0).unwrap();
    for i in 0..5 {
        publish(&mut b, "q", &[i], 0);
    }
    assert_eq!(b.take_deliveries().len(), 2);
}

#[test]
fn disconnect_redelivers_to_other_consumer() {
    let mut b = broker();
    b.declare_queue("q", 0).unwrap();
    let c1 = b.consume("q", 1, 0).unwrap();
    let id = publish(&mut b, "q", b"m", 0);
    assert_eq!(b.take_deliveries()[0].consumer_id, c1);
    let c2 = b.consume("q", 1, 0).unwrap();
    assert_eq!(b.disconnect(&c1, 1).unwrap(), 1);
    let d = b.take_deliveries();
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].consumer_id, c2);
    assert_eq!(d[0].message.msg_id, id);
    assert_eq!(d[0].message.delivery_count, 2);
}

#[test]
fn ack_and_depth_arithmetic() {
    let mut b = broker();
    b.declare_queue("q", 0).unwrap();
    for i in 0..10 {
        publish(&mut b, "q", &[i], 0);
    }
    let c = b.consume("q", 4, 0).unwrap();
    for d in b.take_deliveries() {
        b.ack(&c, &d.message.msg_id, 0).unwrap();
    }
    let stats = b.queue_stats("q", 0).unwrap();
    assert_eq!(stats.acked, 4);
    // Four more are now in flight to the consumer, still owned by the queue.
    assert_eq!(stats.depth, 6);
    assert_eq!(stats.in_flight, 4);
    assert_eq!(b.ack(&c, "missing", 0), Err(BrokerError::UnknownDelivery { consumer_id: c.clone(), msg_id: "missing".into() }));
}

#[test]
fn nack_requeue_redelivers_same_message_next() {
    let mut b = broker();
    b.declare_queue("q", 0).unwrap();
    let first = publish(&mut b, "q", b"1", 0);
    publish(&mut b, "q", b"2", 0);
    let c = b.consume("q", 1, 0).unwrap();
    let d = b.take_deliveries();
    assert_eq!(d[0].message.msg_id, first);
    b.nack(&c, &first, true, 0).unwrap();
    let d = b.take_deliveries();
    assert_eq!(d[0].message.msg_id, first);
    assert_eq!(d[0].message.delivery_count, 2);
}

#[test]
fn nack_without_requeue_dead_letters() {
    let mut b = broker();
    b.declare_queue("q.clean", 0).unwrap();
    let id = publish(&mut b, "q.clean", b"x", 0);
    let c = b.consume("q.clean", 1, 0).unwrap();
    b.take_deliveries();
    b.nack(&c, &id, false, 0).unwrap();
    let dlq = dead_letter_queue("q.clean");
    assert_eq!(dlq, "q.clean.dlq");
    let held: Vec<_> = b.ready_messages(&dlq).unwrap().collect();
    assert_eq!(held.len(), 1);
    assert_eq!(held[0].msg_id, id);
    assert_eq!(b.queue_stats("q.clean", 0).unwrap().depth, 0);
}

#[test]
fn third_failed_attempt_goes_to_dead_letter() {
    let mut b = broker();
    b.declare_queue("q", 0).unwrap();
    let id = publish(&mut b, "q", b"x", 0);
    let c = b.consume("q", 1, 0).unwrap();
    for attempt in 1..=3 {
        let d = b.take_deliveries();
        assert_eq!(d.len(), 1, "attempt {attempt}");
        assert_eq!(d[0].message.delivery_count, attempt);
        b.nack(&c, &id, true, 0).unwrap();
    }
    assert!(b.take_deliveries().is_empty());
    assert_eq!(b.ready_messages("q.dlq").unwrap().count(), 1);
}

#[test]
fn quiet_queue_stats() {
    let mut b = broker();
    b.declare_queue("q", 0).unwrap();
    let s = b.queue_stats("q", 20_000_000).unwrap();
    assert_eq!((s.depth, s.depth_delta, s.enqueue_rate), (0, 0, 0.0));
}

#[test]
fn hundred_publishes_in_window() {
    let mut b = broker();
    b.declare_queue("q", 0).unwrap();
    for i in 0..100u64 {
        publish(&mut b, "q", b"x", 1_000_000 + i * 90_000);
    }
    let s = b.queue_stats("q", 10_500_000).unwrap();
    assert_eq!(s.enqueue_rate, 10.0);
    assert_eq!(s.depth_delta, 100);
}

#[test]
fn msg_ids_are_uuid_shaped_and_unique() {
    let mut b = Broker::new(BrokerConfig { nonce: 0xDEAD_BEEF_0123_4567, ..Default::default() });
    b.declare_queue("q", 0).unwrap();
    let ids: BTreeSet<String> = (0..1000).map(|_| publish(&mut b, "q", b"", 0)).collect();
    assert_eq!(ids.len(), 1000);
    for id in &ids {
        let parts: Vec<usize> = id.split('-').map(str::len).collect();
        assert_eq!(parts, vec![8, 4, 4, 4, 12]);
        assert!(id.chars().all(|c| c == '-' || c.is_ascii_hexdigit()));
    }
}

/// Windowed stats recomputed from the raw event log.
fn oracle_stats(events: &[(u64, i64)], now: u64, window: u64) -> (f64, i64) {
    let horizon = now.saturating_sub(window);
    let publishes = events.iter().filter(|(t, d)| *d > 0 && *t > horizon && *t <= now).count();
    let depth_at = |t: u64| events.iter().filter(|(at, _)| *at <= t).map(|(_, d)| d).sum::<i64>();
    (publishes as f64 / (window as f64 / 1e6), depth_at(now) - depth_at(horizon))
}

proptest! {
    #[test]
    fn stats_window_matches_event_replay(steps in prop::collection::vec((0u64..3_000_000, any::<bool>()), 1..120)) {
        let window = 10_000_000;
        let mut b = broker();
        b.declare_queue("q", 0).unwrap();
        let c = b.consume("q", 1000, 0).unwrap();
        let mut now = 0;
        let mut events = Vec::new();
        let mut held: VecDeque<String> = VecDeque::new();
        for (gap, is_publish) in steps {
            now += gap;
            if is_publish || held.is_empty() {
                publish(&mut b, "q", b"x", now);
                events.push((now, 1));
                held.extend(b.take_deliveries().into_iter().map(|d| d.message.msg_id));
            } else {
                let id = held.pop_front().unwrap();
                b.ack(&c, &id, now).unwrap();
                events.push((now, -1));
            }
            let s = b.queue_stats("q", now).unwrap();
            let (rate, delta) = oracle_stats(&events, now, window);
            prop_assert_eq!(s.enqueue_rate, rate);
            prop_assert_eq!(s.depth_delta, delta);
        }
    }

    #[test]
    fn fifo_single_consumer(n in 1usize..200) {
        let mut b = broker();
        b.declare_queue("q", 0).unwrap();
        let ids: Vec<String> = (0..n).map(|i| publish(&mut b, "q", &i.to_be_bytes(), 0)).collect();
        let c = b.consume("q", 1, 0).unwrap();
        let mut seen = Vec::new();
        loop {
            let d = b.take_deliveries();
            if d.is_empty() { break; }
            prop_assert_eq!(d.len(), 1);
            seen.push(d[0].message.msg_id.clone());
            b.ack(&c, &d[0].message.msg_id, 0).unwrap();
        }
        prop_assert_eq!(seen, ids);
    }

    #[test]
    fn live_consumers_never_see_duplicates(n in 1usize..300, consumers in 1usize..5, prefetch in 1u32..4) {
        let mut b = broker();
        b.declare_queue("q", 0).unwrap();
        for _ in 0..consumers { b.consume("q", prefetch, 0).unwrap(); }
        let mut seen = BTreeSet::new();
        for i in 0..n {
            publish(&mut b, "q", &i.to_be_bytes(), 0);
            for d in b.take_deliveries() {
                prop_assert!(seen.insert(d.message.msg_id.clone()));
                prop_assert_eq!(d.message.delivery_count, 1);
                b.ack(&d.consumer_id, &d.message.msg_id, 0).unwrap();
            }
        }
        prop_assert_eq!(seen.len(), n);
    }

    /// Random interleavings of publish, ack, nack and consumer crashes.
    #[test]
    fn at_least_once_under_crashes(ops in prop::collection::vec(0u8..6, 1..400), prefetch in 1u32..4) {
        let mut b = broker();
        b.declare_queue("q", 0).unwrap();
        let mut live: Vec<String> = (0..2).map(|_| b.consume("q", prefetch, 0).unwrap()).collect();
        let mut in_hand: Vec<(String, String)> = Vec::new();
        let mut published = BTreeSet::new();
        let mut acked: BTreeMap<String, u32> = BTreeMap::new();
        let mut pick = 0usize;
        for op in ops {
            pick = pick.wrapping_mul(31).wrapping_add(op as usize + 7);
            match op {
                0 | 1 => { published.insert(publish(&mut b, "q", b"m", 0)); }
                2 | 3 if !in_hand.is_empty() => {
                    let (c, id) = in_hand.remove(pick % in_hand.len());
                    b.ack(&c, &id, 0).unwrap();
                    *acked.entry(id).or_default() += 1;
                }
                4 if !in_hand.is_empty() => {
                    let (c, id) = in_hand.remove(pick % in_hand.len());
                    b.nack(&c, &id, true, 0).unwrap();
                }
                5 => {
                    let victim = live.remove(pick % live.len());
                    b.disconnect(&victim, 0).unwrap();
                    in_hand.retain(|(c, _)| c != &victim);
                    live.push(b.consume("q", prefetch, 0).unwrap());
                }
                _ => {}
            }
            in_hand.extend(b.take_deliveries().into_iter().map(|d| (d.consumer_id, d.message.msg_id)));
            let s = b.queue_stats("q", 0).unwrap();
            prop_assert_eq!(s.published, s.acked + s.in_flight + s.ready + s.dead_lettered);
            for (c, _) in &in_hand {
                let outstanding = in_hand.iter().filter(|(o, _)| o == c).count();
                prop_assert!(outstanding <= prefetch as usize);
            }
        }
        // Drain with well-behaved consumers.
        while let Some((c, id)) = in_hand.pop() {
            b.ack(&c, &id, 0).unwrap();
            *acked.entry(id).or_default() += 1;
            in_hand.extend(b.take_deliveries().into_iter().map(|d| (d.consumer_id, d.message.msg_id)));
        }
        let dead: BTreeSet<String> = b.ready_messages("q.dlq").map(|m| m.map(|m| m.msg_id.clone()).collect()).unwrap_or_default();
        for id in &published {
            let a = acked.get(id).copied().unwrap_or(0);
            prop_assert!((a == 1 && !dead.contains(id)) || (a == 0 && dead.contains(id)), "{} acked {} times, dead {}", id, a, dead.contains(id));
        }
        prop_assert_eq!(b.queue_stats("q", 0).unwrap().depth, 0);
    }
}
