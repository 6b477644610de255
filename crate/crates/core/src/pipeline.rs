//! Training both classifiers and assembling a [`FlowSystem`].

use log::info;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_flow, stream_rng, AugmentMode, AugmentParams};
use crate::error::Result;
use crate::eval::parallel_map;
use crate::model::io::Checkpoint;
use crate::model::DeciderConfig;
use crate::representation::{FeatureConfig, Granularity};
use crate::rl::{calibrate_threshold, train, CalibrationMode, EpochLog, RewardConfig, TrainConfig, TrainingSet};
use crate::selection::{FlowSystem, SelectionConfig};
use crate::trace::{FlowTrace, UNKNOWN_LABEL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Pseudo-unknown flows added, as a fraction of the known training flows.
    pub pseudo_unknown_fraction: f64,
    /// Oversample minority classes up to the largest class.
    pub balance_classes: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pseudo_unknown_fraction: 0.25,
            balance_classes: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub features: FeatureConfig,
    pub packet_decider: DeciderConfig,
    pub slot_decider: DeciderConfig,
    pub rewards: RewardConfig,
    pub train: TrainConfig,
    pub selection: SelectionConfig,
    pub calibration: CalibrationMode,
    pub augment: AugmentConfig,
}

impl SystemConfig {
    pub fn decider(&self, g: Granularity) -> DeciderConfig {
        match g {
            Granularity::Packet => self.packet_decider,
            Granularity::Slot => self.slot_decider,
        }
    }
}

/// Training flows plus weak-mode copies that balance classes and
/// strong-mode pseudo-unknowns.
pub fn augment_training_set(flows: &[FlowTrace], cfg: &AugmentConfig, mtu: u32, seed: u64) -> Vec<FlowTrace> {
    let known: Vec<&FlowTrace> = flows
        .iter()
        .filter(|f| f.label.as_deref().is_some_and(|l| l != UNKNOWN_LABEL))
        .collect();
    let mut out = flows.to_vec();
    let mut stream = 0u64;
    let mut next_rng = || {
        stream += 1;
        stream_rng(seed, stream)
    };

    if cfg.balance_classes {
        let classes = TrainingSet::known_classes(flows);
        let members: Vec<Vec<&FlowTrace>> = classes
            .iter()
            .map(|c| known.iter().copied().filter(|f| f.label.as_deref() == Some(c)).collect())
            .collect();
        let largest = members.iter().map(Vec::len).max().unwrap_or(0);
        let params = AugmentParams { mtu, ..AugmentParams::new(AugmentMode::WeakBalance) };
        for group in &members {
            for i in group.len()..largest {
                out.push(augment_flow(group[i % group.len()], &params, &mut next_rng()));
            }
        }
    }

    let pseudo = (known.len() as f64 * cfg.pseudo_unknown_fraction).round() as usize;
    if !known.is_empty() {
        let params = AugmentParams { mtu, ..AugmentParams::new(AugmentMode::StrongUnknown) };
        for i in 0..pseudo {
            let mut rng = next_rng();
            let src = known[(i * 7919) % known.len()];
            out.push(augment_flow(src, &params, &mut rng));
        }
    }
    out
}

pub struct TrainedSystem {
    pub system: FlowSystem,
    pub packet_log: Vec<EpochLog>,
    pub slot_log: Vec<EpochLog>,
}

/// Trains one classifier and calibrates its threshold on the unaugmented
/// training flows.
pub fn train_classifier(
    granularity: Granularity,
    original: &[FlowTrace],
    augmented: &[FlowTrace],
    cfg: &SystemConfig,
    seed: u64,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let decider = cfg.decider(granularity);
    let classes = TrainingSet::known_classes(original);
    let data = TrainingSet::with_classes(augmented, classes.clone(), granularity, &cfg.features, decider.c_unk)?;
    let outcome = train(&data, &cfg.train, &decider, &cfg.rewards, seed)?;
    let calib = TrainingSet::with_classes(original, classes, granularity, &cfg.features, decider.c_unk)?;
    let known: Vec<_> = calib.items.into_iter().filter(|i| i.label < data.k()).collect();
    let threshold = calibrate_threshold(&outcome.model, &known, &decider, cfg.calibration)?;
    info!("{} threshold {:.4}", granularity.as_str(), threshold);
    Ok((
        Checkpoint {
            model: outcome.model,
            features: cfg.features,
            decider,
            threshold: Some(threshold),
        },
        outcome.log,
    ))
}

/// Trains the packet and slot classifiers (concurrently when `workers > 1`;
/// results do not depend on it).
pub fn train_system(train_flows: &[FlowTrace], cfg: &SystemConfig, seed: u64, workers: usize) -> Result<TrainedSystem> {
    let augmented = augment_training_set(train_flows, &cfg.augment, cfg.features.mtu, seed);
    info!("training on {} flows ({} after augmentation)", train_flows.len(), augmented.len());
    let grans = [Granularity::Packet, Granularity::Slot];
    let mut results = parallel_map(&grans, workers.min(2), |i, &g| {
        train_classifier(g, train_flows, &augmented, cfg, seed.wrapping_add(1 + i as u64))
    })
    .into_iter();
    let (packet, packet_log) = results.next().expect("packet result")?;
    let (slot, slot_log) = results.next().expect("slot result")?;
    Ok(TrainedSystem {
        system: FlowSystem::new(packet, slot, cfg.selection)?,
        packet_log,
        slot_log,
    })
}
