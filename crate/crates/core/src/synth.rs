//! Synthetic labeled traffic with class-specific direction, size and timing
//! signatures.
//!
//! | class    | proto | pattern                                               |
//! |----------|-------|-------------------------------------------------------|
//! | video    | tcp   | downstream bursts of near-MTU packets, sparse acks    |
//! | chat     | tcp   | small packets alternating direction, human-ish gaps   |
//! | upload   | tcp   | steady near-MTU upstream stream with small acks       |
//! | gaming   | udp   | mid-size packets both ways on a fixed tick            |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::stream_rng;
use crate::trace::{Direction, FiveTuple, FlowTrace, Packet, Protocol};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthClass {
    Video,
    Chat,
    Upload,
    Gaming,
}

impl SynthClass {
    pub const ALL: [SynthClass; 4] = [SynthClass::Video, SynthClass::Chat, SynthClass::Upload, SynthClass::Gaming];

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::Video => "video",
            SynthClass::Chat => "chat",
            SynthClass::Upload => "upload",
            SynthClass::Gaming => "gaming",
        }
    }

    pub fn protocol(self) -> Protocol {
        match self {
            SynthClass::Gaming => Protocol::Udp,
            _ => Protocol::Tcp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub flows_per_class: usize,
    pub classes: Vec<SynthClass>,
    pub min_packets: usize,
    pub max_packets: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            flows_per_class: 500,
            classes: SynthClass::ALL.to_vec(),
            min_packets: 60,
            max_packets: 120,
        }
    }
}

/// Flows interleaved class by class; flow `i` of class `c` uses RNG stream
/// `c * flows_per_class + i`.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Vec<FlowTrace> {
    let mut flows = Vec::with_capacity(cfg.flows_per_class * cfg.classes.len());
    for i in 0..cfg.flows_per_class {
        for (c, &class) in cfg.classes.iter().enumerate() {
            let index = (c * cfg.flows_per_class + i) as u64;
            let mut rng = stream_rng(seed, index);
            flows.push(generate_flow(class, index, cfg, &mut rng));
        }
    }
    flows
}

pub fn generate_flow<R: Rng + ?Sized>(class: SynthClass, index: u64, cfg: &SynthConfig, rng: &mut R) -> FlowTrace {
    let n = rng.random_range(cfg.min_packets..=cfg.max_packets.max(cfg.min_packets));
    let rtt = rng.random_range(0.01..0.06);
    let mut packets = Vec::with_capacity(n);
    let mut t = 0.0;
    if class.protocol() == Protocol::Tcp {
        packets.push(flagged(0.0, Direction::Upstream, true, false));
        packets.push(flagged(rtt, Direction::Downstream, true, true));
        t = rtt + rng.random_range(0.0005..0.002);
        packets.push(flagged(t, Direction::Upstream, false, true));
    }
    let mut burst_left = 0usize;
    // flipped before first use, so UDP flows open upstream like their initiator
    let mut turn = Direction::Downstream;
    while packets.len() < n {
        let (gap, dir, size) = match class {
            SynthClass::Video => {
                if burst_left == 0 {
                    burst_left = rng.random_range(4..=8);
                    (rng.random_range(0.04..0.08), Direction::Upstream, rng.random_range(60..=180))
                } else {
                    burst_left -= 1;
                    (rng.random_range(0.001..0.003), Direction::Downstream, rng.random_range(1300..=1460))
                }
            }
            SynthClass::Chat => {
                turn = if rng.random_bool(0.8) { turn.flipped() } else { turn };
                (rng.random_range(0.02..0.06), turn, rng.random_range(40..=300))
            }
            SynthClass::Upload => {
                if rng.random_bool(0.2) {
                    (rng.random_range(0.001..0.004), Direction::Downstream, rng.random_range(0..=40))
                } else {
                    (rng.random_range(0.005..0.015), Direction::Upstream, rng.random_range(1300..=1460))
                }
            }
            SynthClass::Gaming => {
                turn = turn.flipped();
                (0.03 + rng.random_range(-0.002..0.002), turn, rng.random_range(400..=800))
            }
        };
        t += gap;
        packets.push(Packet::new(t, dir, size));
    }
    let key = FiveTuple {
        src_addr: format!("10.{}.{}.{}", (index >> 16) & 0xff, (index >> 8) & 0xff, index & 0xff),
        dst_addr: format!("198.51.100.{}", 1 + (index % 250)),
        src_port: 20_000 + (index % 40_000) as u16,
        dst_port: match class {
            SynthClass::Gaming => 27_015,
            _ => 443,
        },
        protocol: class.protocol(),
    };
    FlowTrace::new(key, packets, Some(class.name().to_string())).expect("generated flow is non-empty")
}

fn flagged(t: f64, dir: Direction, syn: bool, ack: bool) -> Packet {
    Packet {
        syn,
        ack,
        ..Packet::new(t, dir, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_reproducible_and_balanced() {
        let cfg = SynthConfig {
            flows_per_class: 5,
            ..SynthConfig::default()
        };
        let a = generate_dataset(&cfg, 3);
        assert_eq!(a, generate_dataset(&cfg, 3));
        assert_eq!(a.len(), 20);
        for class in SynthClass::ALL {
            assert_eq!(a.iter().filter(|f| f.label.as_deref() == Some(class.name())).count(), 5);
        }
        assert!(a.iter().all(|f| f.len() >= 60 && f.len() <= 120));
        assert!(a.iter().all(|f| f.packets[0].is_upstream()));
    }

    #[test]
    fn tcp_flows_carry_a_handshake_rtt() {
        let cfg = SynthConfig::default();
        let f = generate_flow(SynthClass::Video, 0, &cfg, &mut stream_rng(0, 0));
        let rtt = f.rtt.unwrap();
        assert!((0.01..0.06).contains(&rtt));
        let g = generate_flow(SynthClass::Gaming, 1, &cfg, &mut stream_rng(0, 1));
        assert_eq!(g.rtt, None);
    }
}
