//! Dual-granularity flow representations.
//!
//! The packet view keeps one `(direction, size, inter-arrival)` point per
//! packet. The slot view aggregates fixed-width time windows into heavy/light
//! per-direction mean payloads plus the upstream/downstream byte ratio; it is
//! computed online by [`SlotAccumulator`] and [`SlotStream`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{FlowTrace, Packet, DEFAULT_MTU};

pub const DEFAULT_SLOT_WIDTH: f64 = 0.05;
pub const DEFAULT_HEAVY_THRESHOLD: u32 = 1200;
pub const DEFAULT_RATIO_CAP: f64 = 100.0;

pub const PACKET_FEATURE_DIM: usize = 3;
pub const SLOT_FEATURE_DIM: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Packet,
    Slot,
}

impl Granularity {
    pub fn input_dim(self) -> usize {
        match self {
            Granularity::Packet => PACKET_FEATURE_DIM,
            Granularity::Slot => SLOT_FEATURE_DIM,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Packet => "packet",
            Granularity::Slot => "slot",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "packet" => Ok(Granularity::Packet),
            "slot" => Ok(Granularity::Slot),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }
}

/// Featurization settings shared by training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub mtu: u32,
    pub slot_width: f64,
    pub heavy_threshold: u32,
    pub ratio_cap: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            mtu: DEFAULT_MTU,
            slot_width: DEFAULT_SLOT_WIDTH,
            heavy_threshold: DEFAULT_HEAVY_THRESHOLD,
            ratio_cap: DEFAULT_RATIO_CAP,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PacketFeature {
    /// 1 upstream, 0 downstream.
    pub dir: f64,
    /// Payload over MTU.
    pub size: f64,
    /// `ln(1 + dt / 1ms)`.
    pub iat: f64,
}

impl PacketFeature {
    pub fn to_array(self) -> [f64; PACKET_FEATURE_DIM] {
        [self.dir, self.size, self.iat]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PacketSequence {
    pub features: Vec<PacketFeature>,
}

impl PacketSequence {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub fn packet_feature(pkt: &Packet, prev_ts: f64, mtu: u32) -> Result<PacketFeature> {
    let dt = pkt.timestamp - prev_ts;
    if dt < 0.0 {
        return Err(Error::TimestampRegression {
            previous: prev_ts,
            current: pkt.timestamp,
        });
    }
    Ok(PacketFeature {
        dir: if pkt.is_upstream() { 1.0 } else { 0.0 },
        size: f64::from(pkt.payload_len) / f64::from(mtu),
        iat: (dt * 1e3).ln_1p(),
    })
}

/// Features for the first `min(n, len)` packets of `flow`.
pub fn build_packet_sequence(flow: &FlowTrace, n: usize, mtu: u32) -> Result<PacketSequence> {
    let first = flow.packets.first().ok_or(Error::EmptyFlow)?;
    let mut prev = first.timestamp;
    let mut features = Vec::with_capacity(n.min(flow.len()));
    for pkt in flow.packets.iter().take(n) {
        features.push(packet_feature(pkt, prev, mtu)?);
        prev = pkt.timestamp;
    }
    Ok(PacketSequence { features })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SlotFeature {
    pub mean_heavy_up: f64,
    pub mean_heavy_down: f64,
    pub mean_light_up: f64,
    pub mean_light_down: f64,
    pub updown_ratio: f64,
}

impl SlotFeature {
    pub fn to_array(self) -> [f64; SLOT_FEATURE_DIM] {
        [
            self.mean_heavy_up,
            self.mean_heavy_down,
            self.mean_light_up,
            self.mean_light_down,
            self.updown_ratio,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotSequence {
    pub slots: Vec<SlotFeature>,
    pub delta: f64,
}

impl SlotSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Index of the half-open window `[n*delta, (n+1)*delta)` containing `ts`.
///
/// Window edges are the floating-point products `n * delta`, so membership
/// agrees with a direct comparison against those edges.
pub fn slot_index(ts: f64, delta: f64) -> usize {
    let mut idx = (ts / delta).floor().max(0.0) as usize;
    while idx > 0 && idx as f64 * delta > ts {
        idx -= 1;
    }
    while (idx + 1) as f64 * delta <= ts {
        idx += 1;
    }
    idx
}

/// Running per-group byte sums for one slot window.
///
/// Sums are kept as integers, so the finalized feature does not depend on
/// the order packets were added in.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotAccumulator {
    index: usize,
    delta: f64,
    heavy_threshold: u32,
    mtu: u32,
    ratio_cap: f64,
    // heavy_up, heavy_down, light_up, light_down
    sums: [u64; 4],
    counts: [u64; 4],
    up_bytes: u64,
    down_bytes: u64,
}

impl SlotAccumulator {
    pub fn new(index: usize, cfg: &FeatureConfig) -> Self {
        SlotAccumulator {
            index,
            delta: cfg.slot_width,
            heavy_threshold: cfg.heavy_threshold,
            mtu: cfg.mtu,
            ratio_cap: cfg.ratio_cap,
            sums: [0; 4],
            counts: [0; 4],
            up_bytes: 0,
            down_bytes: 0,
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn window(&self) -> (f64, f64) {
        (self.index as f64 * self.delta, (self.index + 1) as f64 * self.delta)
    }

    pub fn add(&mut self, pkt: &Packet) -> Result<()> {
        let (start, end) = self.window();
        if !(pkt.timestamp >= start && pkt.timestamp < end) {
            return Err(Error::OutsideSlot {
                timestamp: pkt.timestamp,
                start,
                end,
            });
        }
        self.add_unchecked(pkt);
        Ok(())
    }

    fn add_unchecked(&mut self, pkt: &Packet) {
        let heavy = pkt.payload_len > self.heavy_threshold;
        let up = pkt.is_upstream();
        let group = match (heavy, up) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        let bytes = u64::from(pkt.payload_len);
        self.sums[group] += bytes;
        self.counts[group] += 1;
        if up {
            self.up_bytes += bytes;
        } else {
            self.down_bytes += bytes;
        }
    }

    pub fn finalize(&self) -> SlotFeature {
        let mtu = f64::from(self.mtu);
        let mean = |g: usize| {
            if self.counts[g] == 0 {
                0.0
            } else {
                self.sums[g] as f64 / self.counts[g] as f64 / mtu
            }
        };
        SlotFeature {
            mean_heavy_up: mean(0),
            mean_heavy_down: mean(1),
            mean_light_up: mean(2),
            mean_light_down: mean(3),
            updown_ratio: updown_ratio(self.up_bytes, self.down_bytes, self.ratio_cap),
        }
    }

    /// Resets the accumulator onto the next window.
    pub fn roll(&mut self) {
        self.index += 1;
        self.sums = [0; 4];
        self.counts = [0; 4];
        self.up_bytes = 0;
        self.down_bytes = 0;
    }
}

fn updown_ratio(up: u64, down: u64, cap: f64) -> f64 {
    match (up, down) {
        (0, 0) => 0.0,
        (_, 0) => cap,
        (u, d) => (u as f64 / d as f64).clamp(0.0, cap),
    }
}

/// Aggregates packets that all fall in one slot window.
pub fn slot_aggregate(packets: &[Packet], heavy_threshold: u32, mtu: u32, ratio_cap: f64) -> SlotFeature {
    let cfg = FeatureConfig {
        mtu,
        heavy_threshold,
        ratio_cap,
        ..FeatureConfig::default()
    };
    let mut acc = SlotAccumulator::new(0, &cfg);
    for p in packets {
        acc.add_unchecked(p);
    }
    acc.finalize()
}

/// Closed slots covering `[0, up_to)`; the window containing `up_to` is
/// still open and is not emitted.
pub fn build_slot_sequence(flow: &FlowTrace, cfg: &FeatureConfig, up_to: f64) -> Result<SlotSequence> {
    let delta = cfg.slot_width;
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::InvalidSlotWidth(delta));
    }
    let closed = slot_index(up_to.max(0.0), delta);
    let mut groups: Vec<Vec<Packet>> = vec![Vec::new(); closed];
    for p in &flow.packets {
        let idx = slot_index(p.timestamp, delta);
        if idx < closed {
            groups[idx].push(*p);
        }
    }
    Ok(SlotSequence {
        slots: groups
            .iter()
            .map(|g| slot_aggregate(g, cfg.heavy_threshold, cfg.mtu, cfg.ratio_cap))
            .collect(),
        delta,
    })
}

/// Slot count for a completed flow: every window up to and including the
/// one holding the last packet.
pub fn completed_slot_count(flow: &FlowTrace, delta: f64) -> usize {
    slot_index(flow.duration(), delta) + 1
}

/// Streaming slot builder for one live flow.
#[derive(Clone, Debug)]
pub struct SlotStream {
    acc: SlotAccumulator,
}

impl SlotStream {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        if cfg.slot_width.is_nan() || cfg.slot_width <= 0.0 {
            return Err(Error::InvalidSlotWidth(cfg.slot_width));
        }
        Ok(SlotStream {
            acc: SlotAccumulator::new(0, cfg),
        })
    }

    /// Closes every window that ends at or before `now`, returning
    /// `(slot index, feature)` pairs in order.
    pub fn advance(&mut self, now: f64) -> Vec<(usize, SlotFeature)> {
        let target = slot_index(now.max(0.0), self.acc.delta);
        let mut closed = Vec::new();
        while self.acc.index < target {
            closed.push((self.acc.index, self.acc.finalize()));
            self.acc.roll();
        }
        closed
    }

    /// Feeds one packet, returning the windows its arrival closed.
    pub fn push(&mut self, pkt: &Packet) -> Result<Vec<(usize, SlotFeature)>> {
        let closed = self.advance(pkt.timestamp);
        self.acc.add(pkt)?;
        Ok(closed)
    }

    /// Closes the window currently accumulating (end of flow).
    pub fn finish(&mut self) -> (usize, SlotFeature) {
        let out = (self.acc.index, self.acc.finalize());
        self.acc.roll();
        out
    }
}

/// A model-ready feature sequence with per-step flow time and packet cost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub rows: Vec<Vec<f64>>,
    /// Flow time at which each data point became available.
    pub times: Vec<f64>,
    /// Packets observed when each data point became available.
    pub packets: Vec<usize>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn truncated(&self, n: usize) -> FeatureSequence {
        let n = n.min(self.len());
        FeatureSequence {
            rows: self.rows[..n].to_vec(),
            times: self.times[..n].to_vec(),
            packets: self.packets[..n].to_vec(),
        }
    }
}

/// Featurizes a completed flow at the given granularity, keeping at most
/// `max_steps` data points.
pub fn featurize(flow: &FlowTrace, granularity: Granularity, cfg: &FeatureConfig, max_steps: usize) -> Result<FeatureSequence> {
    match granularity {
        Granularity::Packet => {
            let seq = build_packet_sequence(flow, max_steps, cfg.mtu)?;
            Ok(FeatureSequence {
                rows: seq.features.iter().map(|f| f.to_array().to_vec()).collect(),
                times: flow.packets.iter().take(seq.len()).map(|p| p.timestamp).collect(),
                packets: (1..=seq.len()).collect(),
            })
        }
        Granularity::Slot => {
            if flow.is_empty() {
                return Err(Error::EmptyFlow);
            }
            let delta = cfg.slot_width;
            let n = completed_slot_count(flow, delta).min(max_steps);
            let seq = build_slot_sequence(flow, cfg, n as f64 * delta)?;
            let mut packets = Vec::with_capacity(n);
            let mut seen = 0;
            for i in 0..n {
                let end = (i + 1) as f64 * delta;
                while seen < flow.len() && flow.packets[seen].timestamp < end {
                    seen += 1;
                }
                packets.push(seen);
            }
            Ok(FeatureSequence {
                rows: seq.slots.iter().map(|s| s.to_array().to_vec()).collect(),
                times: (1..=n).map(|i| i as f64 * delta).collect(),
                packets,
            })
        }
    }
}
