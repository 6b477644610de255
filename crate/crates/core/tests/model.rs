use fastflow_core::augment::stream_rng;
use fastflow_core::model::io::{read_checkpoint, write_checkpoint};
use fastflow_core::model::{classify_sequence, decide, soft_confidence, Decision};
use fastflow_core::rl::{reward, RewardConfig};
use fastflow_core::{Checkpoint, DeciderConfig, FeatureConfig, FeatureSequence, Granularity, SeqClassifier};
use proptest::prelude::*;

fn classes(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

fn model(g: Granularity, hidden: usize, k: usize, seed: u64) -> SeqClassifier {
    SeqClassifier::init(g, hidden, classes(k), &mut stream_rng(seed, 0))
}

prop_compose! {
    fn arb_conf()(raw in prop::collection::vec(0.0f64..1.0, 2..7)) -> Vec<f64> {
        soft_confidence(&raw.iter().map(|v| 6.0 * v).collect::<Vec<_>>())
    }
}

prop_compose! {
    fn arb_sequence(dim: usize)(rows in prop::collection::vec(prop::collection::vec(0.0f64..3.0, dim), 1..40)) -> FeatureSequence {
        let n = rows.len();
        FeatureSequence {
            rows,
            times: (0..n).map(|i| i as f64 * 0.01).collect(),
            packets: (1..=n).collect(),
        }
    }
}

proptest! {
    #[test]
    fn decide_matches_its_definition(conf in arb_conf(), t in 1usize..30, t_unk in 0.05f64..0.95, c_unk in 1usize..30) {
        let cfg = DeciderConfig { t_unk, c_unk };
        let k = conf.len() - 1;
        let best = (0..=k).fold(0, |b, i| if conf[i] > conf[b] { i } else { b });
        let want = if t >= c_unk {
            Decision::Emit { class: k, confidence: conf[k] }
        } else if conf[k] >= t_unk || best == k {
            Decision::Wait { p_unknown: conf[k] }
        } else {
            Decision::Emit { class: best, confidence: conf[best] }
        };
        prop_assert_eq!(decide(&conf, t, &cfg), want);
    }

    #[test]
    fn emission_on_a_prefix_is_stable(seed in any::<u64>(), seq in arb_sequence(3), t_unk in 0.2f64..0.95, c_unk in 1usize..25) {
        let m = model(Granularity::Packet, 8, 3, seed);
        let cfg = DeciderConfig { t_unk, c_unk };
        let full = classify_sequence(&m, &seq, &cfg).unwrap();
        let prefix = classify_sequence(&m, &seq.truncated(full.steps_used), &cfg).unwrap();
        prop_assert_eq!(&full, &prefix);
        prop_assert!(full.steps_used <= c_unk.min(seq.len()));
        if !full.is_final {
            prop_assert_eq!(full.steps_used, seq.len());
        }
    }

    #[test]
    fn soft_confidence_is_a_distribution(raw in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let c = soft_confidence(&raw);
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), hidden in 1usize..12, k in 2usize..6, slot in any::<bool>(), threshold in prop::option::of(0.0f64..1.0)) {
        let g = if slot { Granularity::Slot } else { Granularity::Packet };
        let ckpt = Checkpoint {
            model: model(g, hidden, k, seed),
            features: FeatureConfig::default(),
            decider: DeciderConfig::default(),
            threshold,
        };
        let mut bytes = Vec::new();
        write_checkpoint(&ckpt, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &ckpt);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }
}

#[test]
fn reward_table_for_small_k() {
    let cfg = RewardConfig::default();
    for k in 1..=6 {
        for action in 0..=k {
            for label in 0..=k {
                let r = reward(action, label, k, &cfg);
                match (action == k, action == label) {
                    (true, _) => assert_eq!(r, -0.03),
                    (false, true) => assert_eq!(r, 1.0),
                    (false, false) => assert_eq!(r, -1.0),
                }
            }
        }
    }
}

#[test]
fn forced_terminal_rewards_unknown_only() {
    let cfg = RewardConfig::default();
    assert_eq!(cfg.forced_terminal(3, 3), 1.0);
    assert_eq!(cfg.forced_terminal(1, 3), -1.0);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let ckpt = Checkpoint {
        model: model(Granularity::Packet, 4, 2, 1),
        features: FeatureConfig::default(),
        decider: DeciderConfig::default(),
        threshold: None,
    };
    let mut bytes = Vec::new();
    write_checkpoint(&ckpt, &mut bytes).unwrap();
    assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(read_checkpoint(bad_magic.as_slice()).is_err());
    assert!(read_checkpoint(&[][..]).is_err());
}
