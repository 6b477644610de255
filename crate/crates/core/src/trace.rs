//! Packet trace ingestion.
//!
//! Traces are line-delimited JSON, one packet per line:
//!
//! ```text
//! {"ts":0.000000,"src":"10.0.0.1","dst":"1.2.3.4","sp":5000,"dp":443,"proto":"tcp","dir":"up","plen":120,"syn":true,"ack":false}
//! ```
//!
//! `src`/`dst`/`sp`/`dp` give the five-tuple in the orientation the capture
//! point recorded it; `dir` says which endpoint sent this packet (`up` = `src`,
//! `down` = `dst`). [`group_flows`] re-expresses every packet relative to the
//! flow initiator, the sender of the first observed packet.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const DEFAULT_MTU: u32 = 1500;
pub const UNKNOWN_LABEL: &str = "unknown";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "up")]
    Upstream,
    #[serde(rename = "down")]
    Downstream,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Upstream => Direction::Downstream,
            Direction::Downstream => Direction::Upstream,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Upstream => "up",
            Direction::Downstream => "down",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_addr: String,
    pub dst_addr: String,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
}

impl FiveTuple {
    pub fn reversed(&self) -> Self {
        FiveTuple {
            src_addr: self.dst_addr.clone(),
            dst_addr: self.src_addr.clone(),
            src_port: self.dst_port,
            dst_port: self.src_port,
            protocol: self.protocol,
        }
    }

    fn endpoints(&self) -> ((&str, u16), (&str, u16)) {
        let a = (self.src_addr.as_str(), self.src_port);
        let b = (self.dst_addr.as_str(), self.dst_port);
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }
}

impl std::fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}:{}-{}:{}/{}",
            self.src_addr,
            self.src_port,
            self.dst_addr,
            self.dst_port,
            self.protocol.as_str()
        )
    }
}

/// One parsed trace line.
#[derive(Clone, Debug, PartialEq)]
pub struct PacketRecord {
    pub timestamp: f64,
    pub flow_key: FiveTuple,
    pub direction: Direction,
    /// Payload bytes, excluding network and transport headers.
    pub payload_len: u32,
    pub syn: bool,
    pub ack: bool,
    pub label: Option<String>,
}

impl PacketRecord {
    pub fn transport(&self) -> Protocol {
        self.flow_key.protocol
    }

    fn sender(&self) -> (&str, u16) {
        match self.direction {
            Direction::Upstream => (&self.flow_key.src_addr, self.flow_key.src_port),
            Direction::Downstream => (&self.flow_key.dst_addr, self.flow_key.dst_port),
        }
    }
}

/// A packet inside a [`FlowTrace`]: timestamp is relative to the flow's first
/// packet and direction is relative to the initiator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Packet {
    pub timestamp: f64,
    pub direction: Direction,
    pub payload_len: u32,
    pub syn: bool,
    pub ack: bool,
}

impl Packet {
    pub fn new(timestamp: f64, direction: Direction, payload_len: u32) -> Self {
        Packet {
            timestamp,
            direction,
            payload_len,
            syn: false,
            ack: false,
        }
    }

    pub fn is_upstream(&self) -> bool {
        self.direction == Direction::Upstream
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrace {
    /// Canonical key; `src` is the initiator.
    pub key: FiveTuple,
    pub packets: Vec<Packet>,
    pub label: Option<String>,
    pub rtt: Option<f64>,
    /// Absolute timestamp of the first packet in the source trace.
    pub start_time: f64,
}

impl FlowTrace {
    /// Builds a flow from packets already expressed relative to the initiator.
    /// Packets are sorted and rebased so the first one sits at time 0.
    pub fn new(key: FiveTuple, packets: Vec<Packet>, label: Option<String>) -> Result<Self> {
        let mut flow = FlowTrace {
            key,
            packets,
            label,
            rtt: None,
            start_time: 0.0,
        };
        if flow.packets.is_empty() {
            return Err(Error::EmptyFlow);
        }
        flow.normalize();
        flow.rtt = handshake_rtt(&flow);
        Ok(flow)
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.packets.last().map_or(0.0, |p| p.timestamp)
    }

    pub fn is_unknown(&self) -> bool {
        self.label.as_deref() == Some(UNKNOWN_LABEL)
    }

    /// Stable-sorts packets by time and rebases them onto the first packet.
    pub(crate) fn normalize(&mut self) {
        self.packets
            .sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        if let Some(first) = self.packets.first().map(|p| p.timestamp) {
            self.start_time += first;
            for p in &mut self.packets {
                p.timestamp = rebase(p.timestamp, first);
            }
        }
    }
}

/// Relative time rounded to the microsecond, so traces survive a
/// serialize/parse cycle unchanged.
fn rebase(ts: f64, origin: f64) -> f64 {
    ((ts - origin) * 1e6).round() / 1e6
}

/// Parses a line-delimited JSON trace. Blank lines are skipped.
pub fn parse_trace<R: BufRead>(input: R, mtu: u32) -> Result<Vec<PacketRecord>> {
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        records.push(parse_line(trimmed, mtu).map_err(|message| Error::Parse {
            line: idx + 1,
            message,
        })?);
    }
    Ok(records)
}

fn parse_line(line: &str, mtu: u32) -> std::result::Result<PacketRecord, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value
        .as_object()
        .ok_or_else(|| "expected a JSON object".to_string())?;

    let timestamp = get_f64(obj, "ts")?;
    if !timestamp.is_finite() || timestamp < 0.0 {
        return Err("ts must be a non-negative number".into());
    }
    let plen = get_i64(obj, "plen")?;
    if plen < 0 {
        return Err("payload_len must be ≥ 0".into());
    }
    if plen > i64::from(mtu) {
        return Err(format!("payload_len {plen} exceeds MTU {mtu}"));
    }
    let protocol = match get_str(obj, "proto")? {
        "tcp" => Protocol::Tcp,
        "udp" => Protocol::Udp,
        other => return Err(format!("field `proto`: unsupported protocol {other:?}")),
    };
    let direction = match get_str(obj, "dir")? {
        "up" => Direction::Upstream,
        "down" => Direction::Downstream,
        other => return Err(format!("field `dir`: expected \"up\" or \"down\", got {other:?}")),
    };
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err("field `label`: expected a string".into()),
    };

    Ok(PacketRecord {
        timestamp,
        flow_key: FiveTuple {
            src_addr: get_str(obj, "src")?.to_string(),
            dst_addr: get_str(obj, "dst")?.to_string(),
            src_port: get_port(obj, "sp")?,
            dst_port: get_port(obj, "dp")?,
            protocol,
        },
        direction,
        payload_len: plen as u32,
        syn: get_bool(obj, "syn")?,
        ack: get_bool(obj, "ack")?,
        label,
    })
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> std::result::Result<&'a Value, String> {
    obj.get(name)
        .ok_or_else(|| format!("missing field `{name}`"))
}

fn get_f64(obj: &Map<String, Value>, name: &str) -> std::result::Result<f64, String> {
    field(obj, name)?
        .as_f64()
        .ok_or_else(|| format!("field `{name}`: expected a number"))
}

fn get_i64(obj: &Map<String, Value>, name: &str) -> std::result::Result<i64, String> {
    field(obj, name)?
        .as_i64()
        .ok_or_else(|| format!("field `{name}`: expected an integer"))
}

fn get_str<'a>(obj: &'a Map<String, Value>, name: &str) -> std::result::Result<&'a str, String> {
    field(obj, name)?
        .as_str()
        .ok_or_else(|| format!("field `{name}`: expected a string"))
}

fn get_port(obj: &Map<String, Value>, name: &str) -> std::result::Result<u16, String> {
    let v = get_i64(obj, name)?;
    u16::try_from(v).map_err(|_| format!("field `{name}`: port {v} outside 0-65535"))
}

fn get_bool(obj: &Map<String, Value>, name: &str) -> std::result::Result<bool, String> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(false),
        Some(Value::Bool(b)) => Ok(*b),
        Some(_) => Err(format!("field `{name}`: expected a boolean")),
    }
}

/// Groups records into flows keyed by their unordered endpoint pair and
/// protocol, in order of first appearance.
pub fn group_flows(records: &[PacketRecord]) -> Vec<FlowTrace> {
    type EndpointKey<'a> = ((&'a str, u16), (&'a str, u16), Protocol);

    let mut index: HashMap<EndpointKey<'_>, usize> = HashMap::new();
    let mut flows: Vec<FlowTrace> = Vec::new();

    for rec in records {
        let (a, b) = rec.flow_key.endpoints();
        let slot = *index.entry((a, b, rec.flow_key.protocol)).or_insert_with(|| {
            let key = match rec.direction {
                Direction::Upstream => rec.flow_key.clone(),
                Direction::Downstream => rec.flow_key.reversed(),
            };
            flows.push(FlowTrace {
                key,
                packets: Vec::new(),
                label: None,
                rtt: None,
                start_time: 0.0,
            });
            flows.len() - 1
        });
        let flow = &mut flows[slot];
        let from_initiator = rec.sender() == (flow.key.src_addr.as_str(), flow.key.src_port);
        flow.packets.push(Packet {
            timestamp: rec.timestamp,
            direction: if from_initiator {
                Direction::Upstream
            } else {
                Direction::Downstream
            },
            payload_len: rec.payload_len,
            syn: rec.syn,
            ack: rec.ack,
        });
        if flow.label.is_none() {
            flow.label.clone_from(&rec.label);
        }
    }

    for flow in &mut flows {
        flow.normalize();
        flow.rtt = handshake_rtt(flow);
    }
    flows
}

/// Time between the initiator's first SYN and the responder's first SYN-ACK.
pub fn handshake_rtt(flow: &FlowTrace) -> Option<f64> {
    if flow.key.protocol != Protocol::Tcp {
        return None;
    }
    let syn = flow
        .packets
        .iter()
        .find(|p| p.is_upstream() && p.syn && !p.ack)?;
    let syn_ack = flow
        .packets
        .iter()
        .find(|p| !p.is_upstream() && p.syn && p.ack && p.timestamp >= syn.timestamp)?;
    Some(syn_ack.timestamp - syn.timestamp)
}

/// Writes flows as a trace, merged into ascending absolute timestamp order.
pub fn write_trace<W: Write>(flows: &[FlowTrace], mut out: W) -> Result<()> {
    let mut order: Vec<(f64, usize, usize)> = flows
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| {
            f.packets
                .iter()
                .enumerate()
                .map(move |(pi, p)| (f.start_time + p.timestamp, fi, pi))
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    for (ts, fi, pi) in order {
        let flow = &flows[fi];
        let p = &flow.packets[pi];
        write!(
            out,
            "{{\"ts\":{:.6},\"src\":{},\"dst\":{},\"sp\":{},\"dp\":{},\"proto\":\"{}\",\"dir\":\"{}\",\"plen\":{},\"syn\":{},\"ack\":{}",
            ts,
            serde_json::to_string(&flow.key.src_addr)?,
            serde_json::to_string(&flow.key.dst_addr)?,
            flow.key.src_port,
            flow.key.dst_port,
            flow.key.protocol.as_str(),
            p.direction.as_str(),
            p.payload_len,
            p.syn,
            p.ack,
        )?;
        if let Some(label) = &flow.label {
            write!(out, ",\"label\":{}", serde_json::to_string(label)?)?;
        }
        writeln!(out, "}}")?;
    }
    Ok(())
}

/// Reads a trace and groups it into flows.
pub fn read_flows<R: BufRead>(input: R, mtu: u32) -> Result<Vec<FlowTrace>> {
    Ok(group_flows(&parse_trace(input, mtu)?))
}
