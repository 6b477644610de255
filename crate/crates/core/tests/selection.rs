use fastflow_core::selection::{EventSource, ResultEvent, ResultSource, SelectionConfig, SelectionMachine};
use proptest::prelude::*;

fn event(source: EventSource, label: &str, confidence: f64, flow_time: f64) -> ResultEvent {
    ResultEvent {
        source,
        label: label.into(),
        confidence,
        flow_time,
        packets: 1,
    }
}

fn run(events: &[ResultEvent], cfg: &SelectionConfig) -> (Option<fastflow_core::SelectedResult>, Vec<Option<fastflow_core::SelectedResult>>) {
    let mut m = SelectionMachine::new();
    let trace = events.iter().map(|e| m.on_event(e.clone(), cfg)).collect();
    (m.finish(cfg).cloned(), trace)
}

fn arb_event() -> impl Strategy<Value = ResultEvent> {
    (any::<bool>(), 0usize..3, 0.0f64..1.0, 0u32..400).prop_map(|(pkt, label, conf, ms)| {
        let source = if pkt { EventSource::Packet } else { EventSource::Slot };
        event(source, ["a", "b", "c"][label], conf, f64::from(ms) / 1000.0)
    })
}

fn sorted_events() -> impl Strategy<Value = Vec<ResultEvent>> {
    prop::collection::vec(arb_event(), 1..12).prop_map(|mut v| {
        v.sort_by(|a, b| a.flow_time.total_cmp(&b.flow_time));
        v
    })
}

proptest! {
    #[test]
    fn agreeing_events_merge_only_inside_the_window(gap_ms in 0u32..120, p in 0.91f64..1.0, t in 0.81f64..1.0) {
        let cfg = SelectionConfig { t_p: 0.9, t_t: 0.8, delta_select: 0.05, agreement_bonus: 0.1 };
        let gap = f64::from(gap_ms) / 1000.0;
        let events = [event(EventSource::Packet, "a", p, 0.2), event(EventSource::Slot, "a", t, 0.2 + gap)];
        let got = run(&events, &cfg).0.unwrap();
        if gap < cfg.delta_select - 1e-6 {
            prop_assert_eq!(got.source, ResultSource::Agreed);
            prop_assert!((got.confidence - (p.max(t) + 0.1).min(1.0)).abs() < 1e-12);
        } else {
            prop_assert_eq!(got.source, ResultSource::Packet);
            prop_assert_eq!(got.confidence, p);
        }
    }

    #[test]
    fn selection_is_terminal_and_sound(events in sorted_events(), t_p in 0.3f64..0.95, t_t in 0.3f64..0.95) {
        let cfg = SelectionConfig { t_p, t_t, ..SelectionConfig::default() };
        let (done, trace) = run(&events, &cfg);
        if let Some(first) = trace.iter().flatten().next() {
            prop_assert_eq!(Some(first), done.as_ref());
        }
        if let Some(r) = &done {
            let pre_bonus = events.iter().any(|e| {
                e.label == r.label
                    && match e.source {
                        EventSource::Packet => e.confidence > t_p,
                        EventSource::Slot => e.confidence > t_t,
                    }
            });
            prop_assert!(pre_bonus);
            prop_assert!(r.confidence <= 1.0);
        }
        prop_assert_eq!(run(&events, &cfg).0, done);
    }
}

#[test]
fn nothing_confident_selects_nothing() {
    let cfg = SelectionConfig::default();
    let events = [event(EventSource::Packet, "a", 0.5, 0.1), event(EventSource::Slot, "b", 0.6, 0.3)];
    assert_eq!(run(&events, &cfg).0, None);
}
