use std::collections::BTreeSet;

use fastflow_core::eval::{class_counts, macro_f1, make_splits, DecisionRecord, MetricsReport, SplitSpec};
use fastflow_core::trace::{Direction, FiveTuple, FlowTrace, Packet, Protocol};
use proptest::prelude::*;

fn flow(i: usize, label: &str) -> FlowTrace {
    let key = FiveTuple {
        src_addr: format!("10.1.{}.{}", i / 256, i % 256),
        dst_addr: "10.9.9.9".into(),
        src_port: 1000,
        dst_port: 80,
        protocol: Protocol::Tcp,
    };
    FlowTrace::new(key, vec![Packet::new(0.0, Direction::Upstream, i as u32 % 1500)], Some(label.into())).unwrap()
}

fn dataset(sizes: &[usize]) -> Vec<FlowTrace> {
    let mut out = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            out.push(flow(out.len(), &format!("c{c}")));
        }
    }
    out
}

/// Confusion-matrix based macro F1 over `classes`, as a percent.
#[allow(clippy::needless_range_loop)]
fn f1_oracle(classes: &[String], pairs: &[(String, String)]) -> f64 {
    let n = classes.len();
    let mut m = vec![vec![0usize; n + 1]; n];
    for (t, p) in pairs {
        let Some(ti) = classes.iter().position(|c| c == t) else { continue };
        let pi = classes.iter().position(|c| c == p).unwrap_or(n);
        m[ti][pi] += 1;
    }
    let mut total = 0.0;
    for c in 0..n {
        let tp = m[c][c] as f64;
        let predicted: f64 = (0..n).map(|r| m[r][c] as f64).sum();
        let actual: f64 = m[c].iter().sum::<usize>() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        total += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    }
    100.0 * total / n as f64
}

proptest! {
    #[test]
    fn splits_partition_and_relabel(sizes in prop::collection::vec(2usize..30, 3..6), seed in any::<u64>(), fraction in 0.2f64..0.9) {
        let flows = dataset(&sizes);
        let spec = SplitSpec { train_fraction: fraction, iteration_count: 3, seed, ..SplitSpec::default() };
        let splits = make_splits(&flows, &spec).unwrap();
        prop_assert_eq!(splits.len(), 3);
        for s in &splits {
            prop_assert_eq!(s.train.len() + s.test.len(), flows.len());
            let train_keys: BTreeSet<_> = s.train.iter().map(|f| f.key.to_string()).collect();
            prop_assert!(s.test.iter().all(|f| !train_keys.contains(&f.key.to_string())));
            for f in &s.train {
                prop_assert!(!s.excluded.contains(f.label.as_ref().unwrap()));
            }
            for f in &s.test {
                let original = flows.iter().find(|g| g.key == f.key).unwrap();
                if s.excluded.contains(original.label.as_ref().unwrap()) {
                    prop_assert!(f.is_unknown());
                } else {
                    prop_assert_eq!(&f.label, &original.label);
                }
            }
        }
        prop_assert_eq!(make_splits(&flows, &spec).unwrap(), splits);
    }

    #[test]
    fn macro_f1_matches_confusion_matrix(pairs in prop::collection::vec((0usize..4, 0usize..5), 1..200)) {
        let classes: Vec<String> = (0..4).map(|c| format!("c{c}")).collect();
        let label = |i: usize| if i == 4 { "unknown".to_string() } else { format!("c{i}") };
        let pairs: Vec<(String, String)> = pairs.into_iter().map(|(t, p)| (label(t), label(p))).collect();
        let got = macro_f1(&class_counts(&classes, &pairs));
        prop_assert!((got - f1_oracle(&classes, &pairs)).abs() < 1e-9);
    }
}

#[test]
fn excluded_types_are_held_out_of_training() {
    let flows = dataset(&[10, 10, 10]);
    let spec = SplitSpec {
        excluded_types: vec!["c2".into()],
        iteration_count: 2,
        ..SplitSpec::default()
    };
    for s in make_splits(&flows, &spec).unwrap() {
        assert_eq!(s.excluded, vec!["c2".to_string()]);
        assert_eq!(s.test.iter().filter(|f| f.is_unknown()).count(), 10);
        assert_eq!(s.train.len(), 14);
    }
}

#[test]
fn a_singleton_class_cannot_be_split() {
    assert!(make_splits(&dataset(&[5, 1]), &SplitSpec::default()).is_err());
}

#[test]
fn report_counts_match_a_hand_audit() {
    let rec = |t: &str, p: &str, n: usize| DecisionRecord {
        truth: t.into(),
        predicted: p.into(),
        packets: n,
        seconds: n as f64 / 10.0,
    };
    let classes = vec!["a".to_string(), "b".to_string()];
    let decisions = vec![
        rec("a", "a", 4),
        rec("a", "b", 6),
        rec("b", "b", 2),
        rec("b", "unknown", 20),
        rec("unknown", "unknown", 20),
        rec("unknown", "a", 3),
        rec("unknown", "unknown", 20),
        rec("unknown", "unknown", 20),
    ];
    let r = MetricsReport::from_decisions("m", &classes, decisions, true);
    assert_eq!(r.accuracy, 50.0);
    assert_eq!(r.known_flows, 4);
    assert_eq!(r.unknown_flows, 4);
    assert_eq!(r.unknown_tpr, Some(75.0));
    assert_eq!(r.unknown_fpr, Some(25.0));
    assert_eq!(r.packets_mean, 8.0);
    // a: P 1, R 1/2; b: P 1/2, R 1/2
    let f1_a = 2.0 * 0.5 / 1.5;
    assert!((r.macro_f1 - 100.0 * (f1_a + 0.5) / 2.0).abs() < 1e-9);
}

#[test]
fn labeled_unknowns_supplement_training_unless_disabled() {
    let mut flows = dataset(&[10, 10, 10]);
    for i in 0..10 {
        flows.push(flow(100 + i, "unknown"));
    }
    let spec = SplitSpec {
        excluded_types: vec!["c2".into()],
        iteration_count: 1,
        ..SplitSpec::default()
    };
    let split = make_splits(&flows, &spec).unwrap().remove(0);
    assert_eq!(split.train.iter().filter(|f| f.is_unknown()).count(), 7);
    assert_eq!(split.test.iter().filter(|f| f.is_unknown()).count(), 13);

    let test_only = SplitSpec {
        train_on_labeled_unknowns: false,
        ..spec
    };
    let split = make_splits(&flows, &test_only).unwrap().remove(0);
    assert!(split.train.iter().all(|f| !f.is_unknown()));
    assert_eq!(split.test.iter().filter(|f| f.is_unknown()).count(), 20);
}
