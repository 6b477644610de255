//! Real-time fusion of packet and slot classifier results.
//!
//! [`SelectionMachine`] holds at most one unresolved event. An event becomes
//! "lone" once `delta_select` of flow time has passed without a result from
//! the other classifier; two results closer than `delta_select` are compared
//! against each other first. The machine has no clock of its own: time only
//! advances through the timestamps of the inputs it is given.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::io::Checkpoint;
use crate::model::{ClassifierSession, Decision};
use crate::representation::{packet_feature, SlotStream};
use crate::trace::{FlowTrace, UNKNOWN_LABEL};

pub const DEFAULT_DELTA_SELECT: f64 = 0.05;
pub const DEFAULT_AGREEMENT_BONUS: f64 = 0.1;

/// Slack on window comparisons, so events written `delta_select` apart in
/// decimal are not split by float rounding of their difference.
pub const WINDOW_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub t_p: f64,
    pub t_t: f64,
    pub delta_select: f64,
    pub agreement_bonus: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            t_p: 0.9,
            t_t: 0.9,
            delta_select: DEFAULT_DELTA_SELECT,
            agreement_bonus: DEFAULT_AGREEMENT_BONUS,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta_select.is_nan() || self.delta_select <= 0.0 {
            return Err(Error::Config("delta_select must be positive".into()));
        }
        if self.agreement_bonus.is_nan() || self.agreement_bonus < 0.0 {
            return Err(Error::Config("agreement_bonus must be non-negative".into()));
        }
        Ok(())
    }

    fn threshold(&self, source: EventSource) -> f64 {
        match source {
            EventSource::Packet => self.t_p,
            EventSource::Slot => self.t_t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventSource {
    Packet,
    Slot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultSource {
    Packet,
    Slot,
    Agreed,
}

impl From<EventSource> for ResultSource {
    fn from(s: EventSource) -> Self {
        match s {
            EventSource::Packet => ResultSource::Packet,
            EventSource::Slot => ResultSource::Slot,
        }
    }
}

impl ResultSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ResultSource::Packet => "packet",
            ResultSource::Slot => "slot",
            ResultSource::Agreed => "agreed",
        }
    }
}

/// A classifier emission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEvent {
    pub source: EventSource,
    pub label: String,
    pub confidence: f64,
    pub flow_time: f64,
    /// Packets of the flow seen when the result was produced.
    pub packets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedResult {
    pub label: String,
    pub confidence: f64,
    pub source: ResultSource,
    pub decided_at: f64,
    pub packets_consumed: usize,
}

impl SelectedResult {
    fn from_event(ev: &ResultEvent) -> Self {
        SelectedResult {
            label: ev.label.clone(),
            confidence: ev.confidence,
            source: ev.source.into(),
            decided_at: ev.flow_time,
            packets_consumed: ev.packets,
        }
    }

    pub fn is_unknown(&self) -> bool {
        self.label == UNKNOWN_LABEL
    }
}

/// Per-flow selection state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionMachine {
    pending: Option<ResultEvent>,
    selected: Option<SelectedResult>,
}

impl SelectionMachine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn selected(&self) -> Option<&SelectedResult> {
        self.selected.as_ref()
    }

    pub fn pending(&self) -> Option<&ResultEvent> {
        self.pending.as_ref()
    }

    /// Processes one event. Returns the selection once one exists; events
    /// after that are ignored.
    pub fn on_event(&mut self, ev: ResultEvent, cfg: &SelectionConfig) -> Option<SelectedResult> {
        if self.selected.is_some() {
            return self.selected.clone();
        }
        if self.advance(ev.flow_time, cfg).is_some() {
            return self.selected.clone();
        }
        match self.pending.take() {
            Some(prev) if prev.source == ev.source => {
                // superseded before a counterpart arrived
                if self.lone(&prev, cfg) {
                    return self.selected.clone();
                }
                self.pending = Some(ev);
            }
            Some(prev) => {
                let (p, t) = match prev.source {
                    EventSource::Packet => (prev, ev),
                    EventSource::Slot => (ev, prev),
                };
                self.synchronous(&p, &t, cfg);
            }
            None => self.pending = Some(ev),
        }
        self.selected.clone()
    }

    /// Resolves a pending event as lone if `now` is at least `delta_select`
    /// past it (within [`WINDOW_TOLERANCE`]).
    pub fn advance(&mut self, now: f64, cfg: &SelectionConfig) -> Option<&SelectedResult> {
        if self.selected.is_none() {
            if let Some(prev) = self.pending.take_if(|p| now - p.flow_time >= cfg.delta_select - WINDOW_TOLERANCE) {
                self.lone(&prev, cfg);
            }
        }
        self.selected.as_ref()
    }

    /// End of input: any pending event is lone.
    pub fn finish(&mut self, cfg: &SelectionConfig) -> Option<&SelectedResult> {
        if self.selected.is_none() {
            if let Some(prev) = self.pending.take() {
                self.lone(&prev, cfg);
            }
        }
        self.selected.as_ref()
    }

    fn lone(&mut self, ev: &ResultEvent, cfg: &SelectionConfig) -> bool {
        if ev.confidence > cfg.threshold(ev.source) {
            self.selected = Some(SelectedResult::from_event(ev));
        }
        self.selected.is_some()
    }

    fn synchronous(&mut self, p: &ResultEvent, t: &ResultEvent, cfg: &SelectionConfig) {
        let winner = if p.confidence >= t.confidence { p } else { t };
        if winner.confidence <= cfg.threshold(winner.source) {
            return;
        }
        let mut out = SelectedResult::from_event(winner);
        if p.label == t.label {
            out.confidence = (winner.confidence + cfg.agreement_bonus).min(1.0);
            out.source = ResultSource::Agreed;
            let later = if p.flow_time >= t.flow_time { p } else { t };
            out.decided_at = later.flow_time;
            out.packets_consumed = later.packets;
        }
        self.selected = Some(out);
    }
}

/// Which classifiers [`run_flow`] drives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Fused,
    PacketOnly,
    SlotOnly,
}

impl FusionMode {
    fn packet(self) -> bool {
        self != FusionMode::SlotOnly
    }

    fn slot(self) -> bool {
        self != FusionMode::PacketOnly
    }
}

/// A packet and a slot classifier with their selection settings.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSystem {
    pub packet: Checkpoint,
    pub slot: Checkpoint,
    pub selection: SelectionConfig,
}

impl FlowSystem {
    /// Pairs two checkpoints, taking thresholds from their calibration when
    /// present.
    pub fn new(packet: Checkpoint, slot: Checkpoint, mut selection: SelectionConfig) -> Result<Self> {
        if packet.model.class_names != slot.model.class_names {
            return Err(Error::ClassMismatch(packet.model.class_names.clone(), slot.model.class_names.clone()));
        }
        selection.validate()?;
        if let Some(t) = packet.threshold {
            selection.t_p = t;
        }
        if let Some(t) = slot.threshold {
            selection.t_t = t;
        }
        Ok(FlowSystem { packet, slot, selection })
    }

    pub fn class_names(&self) -> &[String] {
        &self.packet.model.class_names
    }
}

/// Tracks the latest temporary or final unknown output for the fallthrough.
#[derive(Default)]
struct Fallback(Option<SelectedResult>);

impl Fallback {
    fn note(&mut self, source: EventSource, confidence: f64, flow_time: f64, packets: usize) {
        self.0 = Some(SelectedResult {
            label: UNKNOWN_LABEL.to_string(),
            confidence,
            source: source.into(),
            decided_at: flow_time,
            packets_consumed: packets,
        });
    }
}

struct Driver<'a> {
    session: ClassifierSession<'a, f32>,
    source: EventSource,
}

impl Driver<'_> {
    /// Steps the classifier on one data point, returning its emission as an
    /// event when the decider produced a known class.
    fn step(&mut self, x: &[f64], flow_time: f64, packets: usize, fallback: &mut Fallback) -> Result<Option<ResultEvent>> {
        let model = self.session.model();
        match self.session.push(x)? {
            None => Ok(None),
            Some(Decision::Wait { p_unknown }) => {
                fallback.note(self.source, p_unknown, flow_time, packets);
                Ok(None)
            }
            Some(Decision::Emit { class, confidence }) if class == model.unknown_index() => {
                fallback.note(self.source, confidence, flow_time, packets);
                Ok(None)
            }
            Some(Decision::Emit { class, confidence }) => Ok(Some(ResultEvent {
                source: self.source,
                label: model.label_of(class).to_string(),
                confidence,
                flow_time,
                packets,
            })),
        }
    }
}

/// Replays `flow` through both classifiers in flow-time order and returns
/// the selected result.
///
/// The packet classifier steps at each arrival; the slot classifier steps
/// when a slot closes, at the slot's end time. The final partial slot closes
/// when the flow ends.
pub fn run_flow(flow: &FlowTrace, system: &FlowSystem, mode: FusionMode) -> Result<SelectedResult> {
    let cfg = &system.selection;
    let first = flow.packets.first().ok_or(Error::EmptyFlow)?;
    let mut machine = SelectionMachine::new();
    let mut fallback = Fallback::default();
    let mut packet = Driver {
        session: ClassifierSession::new(&system.packet.model, system.packet.decider),
        source: EventSource::Packet,
    };
    let mut slot = Driver {
        session: ClassifierSession::new(&system.slot.model, system.slot.decider),
        source: EventSource::Slot,
    };
    let mut slots = SlotStream::new(&system.slot.features)?;
    let delta = system.slot.features.slot_width;
    let mtu = system.packet.features.mtu;

    let feed = |machine: &mut SelectionMachine, ev: Option<ResultEvent>| match ev {
        Some(ev) => machine.on_event(ev, cfg).is_some(),
        None => false,
    };

    let mut prev_ts = first.timestamp;
    for (i, pkt) in flow.packets.iter().enumerate() {
        if mode.slot() && !slot.session.exhausted() {
            for (idx, feature) in slots.push(pkt)? {
                let end = (idx + 1) as f64 * delta;
                if machine.advance(end, cfg).is_some() {
                    return Ok(machine.selected.unwrap());
                }
                let ev = slot.step(&feature.to_array(), end, i, &mut fallback)?;
                if feed(&mut machine, ev) {
                    return Ok(machine.selected.unwrap());
                }
            }
        }
        if machine.advance(pkt.timestamp, cfg).is_some() {
            return Ok(machine.selected.unwrap());
        }
        if mode.packet() && !packet.session.exhausted() {
            let x = packet_feature(pkt, prev_ts, mtu)?.to_array();
            let ev = packet.step(&x, pkt.timestamp, i + 1, &mut fallback)?;
            if feed(&mut machine, ev) {
                return Ok(machine.selected.unwrap());
            }
        }
        prev_ts = pkt.timestamp;
        let packet_done = !mode.packet() || packet.session.exhausted();
        let slot_done = !mode.slot() || slot.session.exhausted();
        if packet_done && slot_done {
            break;
        }
    }
    if mode.slot() && !slot.session.exhausted() {
        let (idx, feature) = slots.finish();
        let end = (idx + 1) as f64 * delta;
        if machine.advance(end, cfg).is_none() {
            let ev = slot.step(&feature.to_array(), end, flow.len(), &mut fallback)?;
            feed(&mut machine, ev);
        }
    }
    if let Some(sel) = machine.finish(cfg) {
        return Ok(sel.clone());
    }
    Ok(fallback.0.unwrap_or_else(|| SelectedResult {
        label: UNKNOWN_LABEL.to_string(),
        confidence: 0.0,
        source: mode_source(mode),
        decided_at: flow.duration(),
        packets_consumed: flow.len(),
    }))
}

fn mode_source(mode: FusionMode) -> ResultSource {
    match mode {
        FusionMode::SlotOnly => ResultSource::Slot,
        _ => ResultSource::Packet,
    }
}
