use fastflow_core::representation::{
    build_packet_sequence, build_slot_sequence, completed_slot_count, featurize, slot_aggregate, FeatureConfig, Granularity, SlotFeature,
    SlotStream,
};
use fastflow_core::trace::{Direction, FiveTuple, FlowTrace, Packet, Protocol};
use proptest::prelude::*;

fn key(protocol: Protocol) -> FiveTuple {
    FiveTuple {
        src_addr: "10.0.0.1".into(),
        dst_addr: "10.0.0.2".into(),
        src_port: 5000,
        dst_port: 443,
        protocol,
    }
}

prop_compose! {
    fn arb_flow()(
        steps in prop::collection::vec((0u32..1_000_000, any::<bool>(), 0u32..=1500), 1..120),
        udp in any::<bool>(),
    ) -> FlowTrace {
        let mut t = 0.0;
        let packets = steps
            .into_iter()
            .map(|(gap_us, up, len)| {
                t += f64::from(gap_us % 200_000) * 1e-6;
                Packet::new(t, if up { Direction::Upstream } else { Direction::Downstream }, len)
            })
            .collect();
        FlowTrace::new(key(if udp { Protocol::Udp } else { Protocol::Tcp }), packets, None).unwrap()
    }
}

fn streamed(flow: &FlowTrace, cfg: &FeatureConfig) -> Vec<(usize, SlotFeature)> {
    let mut stream = SlotStream::new(cfg).unwrap();
    let mut out = Vec::new();
    for p in &flow.packets {
        out.extend(stream.push(p).unwrap());
    }
    out.push(stream.finish());
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn streaming_slots_match_batch_aggregation(flow in arb_flow()) {
        let cfg = FeatureConfig::default();
        let online = streamed(&flow, &cfg);
        let n = completed_slot_count(&flow, cfg.slot_width);
        let offline = build_slot_sequence(&flow, &cfg, n as f64 * cfg.slot_width).unwrap();
        prop_assert_eq!(online.len(), n);
        for (i, (idx, feat)) in online.iter().enumerate() {
            prop_assert_eq!(*idx, i);
            prop_assert_eq!(feat, &offline.slots[i]);
        }
    }

    #[test]
    fn slot_features_are_bounded(flow in arb_flow()) {
        let cfg = FeatureConfig::default();
        let seq = featurize(&flow, Granularity::Slot, &cfg, usize::MAX).unwrap();
        for row in &seq.rows {
            prop_assert!(row[..4].iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((0.0..=cfg.ratio_cap).contains(&row[4]));
        }
        prop_assert!(seq.times.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(seq.packets.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*seq.packets.last().unwrap(), flow.len());
    }

    #[test]
    fn packet_features_follow_their_definition(flow in arb_flow()) {
        let seq = build_packet_sequence(&flow, usize::MAX, 1500).unwrap();
        prop_assert_eq!(seq.len(), flow.len());
        for (i, f) in seq.features.iter().enumerate() {
            let [dir, size, gap] = f.to_array();
            let p = &flow.packets[i];
            prop_assert_eq!(dir, if p.is_upstream() { 1.0 } else { 0.0 });
            prop_assert_eq!(size, f64::from(p.payload_len) / 1500.0);
            let prev = if i == 0 { p.timestamp } else { flow.packets[i - 1].timestamp };
            prop_assert!((gap - (1.0 + 1000.0 * (p.timestamp - prev)).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn packet_sequence_truncates(flow in arb_flow(), n in 1usize..50) {
        let seq = build_packet_sequence(&flow, n, 1500).unwrap();
        prop_assert_eq!(seq.len(), n.min(flow.len()));
    }
}

#[test]
fn empty_slot_is_all_zero() {
    let f = slot_aggregate(&[], 100, 1500, 10.0);
    assert_eq!(f.to_array(), [0.0; 5]);
}

#[test]
fn upstream_only_slot_hits_the_ratio_cap() {
    let pkts = [Packet::new(0.0, Direction::Upstream, 1200), Packet::new(0.01, Direction::Upstream, 50)];
    let f = slot_aggregate(&pkts, 100, 1500, 10.0);
    assert_eq!(f.to_array(), [0.8, 0.0, 50.0 / 1500.0, 0.0, 10.0]);
}

#[test]
fn idle_gaps_produce_empty_slots() {
    let flow = FlowTrace::new(
        key(Protocol::Udp),
        vec![Packet::new(0.0, Direction::Upstream, 10), Packet::new(0.26, Direction::Downstream, 20)],
        None,
    )
    .unwrap();
    let slots = streamed(&flow, &FeatureConfig::default());
    assert_eq!(slots.len(), 6);
    assert!(slots[1..5].iter().all(|(_, f)| f.to_array() == [0.0; 5]));
}
