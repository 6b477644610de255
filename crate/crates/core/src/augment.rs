//! Flow augmentation and packet-loss simulation.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::trace::{FlowTrace, Packet, Protocol, UNKNOWN_LABEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Heavy distortion; output is labeled unknown.
    StrongUnknown,
    /// Light distortion for class balancing; label preserved.
    WeakBalance,
}

impl AugmentMode {
    /// Range the sampled-packet fraction is drawn from.
    pub fn attr_range(self) -> (f64, f64) {
        match self {
            AugmentMode::StrongUnknown => (0.6, 0.9),
            AugmentMode::WeakBalance => (0.0, 0.2),
        }
    }

    pub fn draw_alpha_attr<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        let (lo, hi) = self.attr_range();
        rng.random_range(lo..=hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub mode: AugmentMode,
    /// Fixed sampled fraction; drawn from the mode's range when absent.
    pub alpha_attr: Option<f64>,
    pub alpha_ps: f64,
    pub alpha_ts: f64,
    pub alpha_dir: f64,
    pub mtu: u32,
}

impl AugmentParams {
    pub fn new(mode: AugmentMode) -> Self {
        AugmentParams {
            mode,
            alpha_attr: None,
            alpha_ps: 0.2,
            alpha_ts: 0.2,
            alpha_dir: 0.2,
            mtu: crate::trace::DEFAULT_MTU,
        }
    }
}

/// What one augmentation call did, for auditing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentTrace {
    pub alpha_attr: f64,
    /// `(original index, distorted payload)` for each sampled packet.
    pub sampled: Vec<(usize, u32)>,
}

/// `ps * alpha + u * (1 - alpha)` rounded and clamped to `[0, mtu]`,
/// where `u` is a uniform draw on `[0, mtu]`.
pub fn distort_payload(payload: u32, uniform: f64, alpha_ps: f64, mtu: u32) -> u32 {
    let v = f64::from(payload) * alpha_ps + uniform * (1.0 - alpha_ps);
    v.round().clamp(0.0, f64::from(mtu)) as u32
}

/// Shifts `t` by a random fraction of its neighbour gaps. A missing
/// neighbour contributes no gap.
pub fn distort_timestamp(prev: Option<f64>, t: f64, next: Option<f64>, u_next: f64, u_prev: f64, alpha_ts: f64) -> f64 {
    let forward = next.map_or(0.0, |n| (n - t) * u_next);
    let backward = prev.map_or(0.0, |p| (t - p) * u_prev);
    (t + (forward - backward) * alpha_ts).max(0.0)
}

pub fn augment_flow<R: Rng + ?Sized>(flow: &FlowTrace, params: &AugmentParams, rng: &mut R) -> FlowTrace {
    augment_flow_traced(flow, params, rng).0
}

pub fn augment_flow_traced<R: Rng + ?Sized>(flow: &FlowTrace, params: &AugmentParams, rng: &mut R) -> (FlowTrace, AugmentTrace) {
    let alpha_attr = params
        .alpha_attr
        .unwrap_or_else(|| params.mode.draw_alpha_attr(rng))
        .clamp(0.0, 1.0);
    let n = flow.packets.len();
    let count = ((alpha_attr * n as f64).round() as usize).min(n);

    let mut chosen: Vec<usize> = sample(rng, n, count).into_vec();
    chosen.sort_unstable();

    let original = &flow.packets;
    let mut packets: Vec<Packet> = original.clone();
    let mut trace = AugmentTrace {
        alpha_attr,
        sampled: Vec::with_capacity(count),
    };
    let mtu = params.mtu;
    for &i in &chosen {
        let u_payload = rng.random_range(0.0..=f64::from(mtu));
        let u_next: f64 = rng.random();
        let u_prev: f64 = rng.random();
        let flip = rng.random_bool(params.alpha_dir.clamp(0.0, 1.0));

        let pkt = &mut packets[i];
        pkt.payload_len = distort_payload(original[i].payload_len, u_payload, params.alpha_ps, mtu);
        pkt.timestamp = distort_timestamp(
            i.checked_sub(1).map(|j| original[j].timestamp),
            original[i].timestamp,
            original.get(i + 1).map(|p| p.timestamp),
            u_next,
            u_prev,
            params.alpha_ts,
        );
        if flip {
            pkt.direction = pkt.direction.flipped();
        }
        trace.sampled.push((i, pkt.payload_len));
    }

    let mut out = FlowTrace {
        key: flow.key.clone(),
        packets,
        label: match params.mode {
            AugmentMode::StrongUnknown => Some(UNKNOWN_LABEL.to_string()),
            AugmentMode::WeakBalance => flow.label.clone(),
        },
        rtt: flow.rtt,
        start_time: flow.start_time,
    };
    out.normalize();
    (out, trace)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisorderParams {
    pub drop_mean: f64,
    pub drop_std: f64,
    /// Retransmission delay when no handshake RTT is observable.
    pub fallback_rtt: f64,
}

impl Default for DisorderParams {
    fn default() -> Self {
        DisorderParams {
            drop_mean: 0.05,
            drop_std: 0.035,
            fallback_rtt: 0.05,
        }
    }
}

impl DisorderParams {
    /// Per-flow drop rate from the normal distribution truncated to `[0, 1)`.
    pub fn draw_drop_rate<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.drop_std <= 0.0 {
            return self.drop_mean.clamp(0.0, 1.0 - f64::EPSILON);
        }
        let normal = Normal::new(self.drop_mean, self.drop_std).expect("finite std");
        loop {
            let v = normal.sample(rng);
            if (0.0..1.0).contains(&v) {
                return v;
            }
        }
    }
}

pub fn simulate_disorder<R: Rng + ?Sized>(flow: &FlowTrace, params: &DisorderParams, rng: &mut R) -> FlowTrace {
    let rate = params.draw_drop_rate(rng);
    let rtt = flow.rtt.unwrap_or(params.fallback_rtt);
    simulate_disorder_with_rate(flow, rate, rtt, rng)
}

/// Drops each packet but the first with probability `rate`. TCP packets come
/// back `rtt` later; UDP packets are lost.
pub fn simulate_disorder_with_rate<R: Rng + ?Sized>(flow: &FlowTrace, rate: f64, rtt: f64, rng: &mut R) -> FlowTrace {
    let tcp = flow.key.protocol == Protocol::Tcp;
    let rate = rate.clamp(0.0, 1.0);
    let mut packets = Vec::with_capacity(flow.packets.len());
    for (i, p) in flow.packets.iter().enumerate() {
        if i > 0 && rng.random_bool(rate) {
            if tcp {
                let mut resent = *p;
                resent.timestamp += rtt;
                packets.push(resent);
            }
        } else {
            packets.push(*p);
        }
    }
    let mut out = FlowTrace {
        packets,
        ..flow.clone()
    };
    out.normalize();
    out
}

/// Independent generator for item `index` under `master_seed`.
pub fn stream_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Direction, FiveTuple};

    fn flow(proto: Protocol, n: usize) -> FlowTrace {
        let key = FiveTuple {
            src_addr: "a".into(),
            dst_addr: "b".into(),
            src_port: 1,
            dst_port: 2,
            protocol: proto,
        };
        let packets = (0..n)
            .map(|i| {
                let dir = if i % 3 == 0 { Direction::Upstream } else { Direction::Downstream };
                Packet::new(i as f64 * 0.01, dir, 100 + 10 * i as u32)
            })
            .collect();
        FlowTrace::new(key, packets, Some("video".into())).unwrap()
    }

    #[test]
    fn zero_fraction_is_identity() {
        let f = flow(Protocol::Tcp, 20);
        let mut params = AugmentParams::new(AugmentMode::WeakBalance);
        params.alpha_attr = Some(0.0);
        let out = augment_flow(&f, &params, &mut stream_rng(1, 0));
        assert_eq!(out, f);
    }

    #[test]
    fn payload_distortion_pinned_draw() {
        assert_eq!(distort_payload(1000, 1500.0, 0.2, 1500), 1400);
        assert_eq!(distort_payload(1500, 1500.0, 0.2, 1500), 1500);
        assert_eq!(distort_payload(0, 0.0, 0.2, 1500), 0);
    }

    #[test]
    fn timestamp_distortion_boundaries() {
        // first packet: only the forward gap applies
        assert!((distort_timestamp(None, 0.0, Some(1.0), 0.5, 0.9, 0.2) - 0.1).abs() < 1e-12);
        // last packet: only the backward gap applies
        assert!((distort_timestamp(Some(1.0), 2.0, None, 0.9, 0.5, 0.2) - 1.9).abs() < 1e-12);
        assert_eq!(distort_timestamp(Some(0.0), 0.0, None, 0.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn labels_follow_mode() {
        let f = flow(Protocol::Udp, 30);
        let mut rng = stream_rng(2, 0);
        let strong = augment_flow(&f, &AugmentParams::new(AugmentMode::StrongUnknown), &mut rng);
        assert_eq!(strong.label.as_deref(), Some(UNKNOWN_LABEL));
        let weak = augment_flow(&f, &AugmentParams::new(AugmentMode::WeakBalance), &mut rng);
        assert_eq!(weak.label, f.label);
    }

    #[test]
    fn augmented_flows_are_normalized_and_seeded() {
        let f = flow(Protocol::Tcp, 50);
        let params = AugmentParams::new(AugmentMode::StrongUnknown);
        let a = augment_flow(&f, &params, &mut stream_rng(9, 3));
        let b = augment_flow(&f, &params, &mut stream_rng(9, 3));
        assert_eq!(a, b);
        assert_eq!(a.packets[0].timestamp, 0.0);
        assert!(a.packets.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert!(a.packets.iter().all(|p| p.payload_len <= 1500));
        assert_eq!(a.len(), f.len());
    }

    #[test]
    fn zero_drop_rate_is_identity() {
        let f = flow(Protocol::Tcp, 40);
        assert_eq!(simulate_disorder_with_rate(&f, 0.0, 0.02, &mut stream_rng(3, 0)), f);
        let p = DisorderParams {
            drop_mean: 0.0,
            drop_std: 0.0,
            ..DisorderParams::default()
        };
        assert_eq!(simulate_disorder(&f, &p, &mut stream_rng(3, 1)), f);
    }

    #[test]
    fn tcp_retransmission_reinserts_after_rtt() {
        let key = FiveTuple {
            src_addr: "a".into(),
            dst_addr: "b".into(),
            src_port: 1,
            dst_port: 2,
            protocol: Protocol::Tcp,
        };
        let pkts = vec![
            Packet::new(0.0, Direction::Upstream, 10),
            Packet::new(1.0, Direction::Downstream, 20),
            Packet::new(1.01, Direction::Upstream, 30),
        ];
        let f = FlowTrace::new(key, pkts, None).unwrap();
        // rate 1 drops every packet except the first
        let out = simulate_disorder_with_rate(&f, 1.0, 0.02, &mut stream_rng(0, 0));
        assert_eq!(out.len(), 3);
        let ts: Vec<f64> = out.packets.iter().map(|p| p.timestamp).collect();
        assert_eq!(ts, vec![0.0, 1.02, 1.03]);
        assert_eq!(out.packets[1].payload_len, 20);
    }

    #[test]
    fn disorder_cardinality() {
        for seed in 0..50 {
            let tcp = flow(Protocol::Tcp, 60);
            let udp = flow(Protocol::Udp, 60);
            let mut rng = stream_rng(seed, 0);
            assert_eq!(simulate_disorder(&tcp, &DisorderParams::default(), &mut rng).len(), 60);
            let u = simulate_disorder(&udp, &DisorderParams::default(), &mut rng);
            assert!(u.len() <= 60 && u.packets[0] == udp.packets[0]);
        }
    }

    #[test]
    fn drop_rate_is_truncated() {
        let p = DisorderParams {
            drop_mean: 0.0,
            drop_std: 0.5,
            ..DisorderParams::default()
        };
        let mut rng = stream_rng(4, 0);
        for _ in 0..1000 {
            let r = p.draw_drop_rate(&mut rng);
            assert!((0.0..1.0).contains(&r));
        }
    }
}
