//! Fixtures shared by the benchmarks.

use fastflow_core::augment::stream_rng;
use fastflow_core::synth::{generate_dataset, SynthClass, SynthConfig};
use fastflow_core::{Checkpoint, DeciderConfig, FeatureConfig, FlowSystem, FlowTrace, Granularity, SelectionConfig, SeqClassifier};

pub const HIDDEN: usize = 128;

pub fn flows(per_class: usize) -> Vec<FlowTrace> {
    let cfg = SynthConfig {
        flows_per_class: per_class,
        classes: vec![SynthClass::Video, SynthClass::Chat, SynthClass::Upload],
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, 11)
}

pub fn class_names() -> Vec<String> {
    ["chat", "upload", "video"].map(String::from).to_vec()
}

pub fn model(granularity: Granularity, seed: u64) -> SeqClassifier {
    SeqClassifier::init(granularity, HIDDEN, class_names(), &mut stream_rng(seed, 0))
}

/// An untrained system with low thresholds, so selection work resembles a
/// trained one that decides early.
pub fn system() -> FlowSystem {
    let ckpt = |g, seed| Checkpoint {
        model: model(g, seed),
        features: FeatureConfig::default(),
        decider: DeciderConfig::default(),
        threshold: Some(0.3),
    };
    FlowSystem::new(ckpt(Granularity::Packet, 1), ckpt(Granularity::Slot, 2), SelectionConfig::default()).expect("matching classes")
}
