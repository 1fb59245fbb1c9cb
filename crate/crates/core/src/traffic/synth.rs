//! Deterministic synthetic traffic: constant-rate UDP flows and a SYN-flood
//! scenario embedded in benign traffic.

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrafficError;
use crate::pipeline::build::{ipv4_frame, L4};

pub const MIN_PACKET_SIZE: usize = 64;
pub const MAX_PACKET_SIZE: usize = 1514;
pub const IPERF_PORT: u16 = 5001;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub flows: usize,
    /// Frame size on the wire, headers included.
    pub packet_size: usize,
    pub src_pool: (Ipv4Addr, u32),
    pub dst_pool: (Ipv4Addr, u32),
    pub rate_pps: f64,
    pub start_ts: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            flows: 4,
            packet_size: 100,
            src_pool: (Ipv4Addr::new(10, 0, 0, 1), 250),
            dst_pool: (Ipv4Addr::new(10, 0, 1, 1), 250),
            rate_pps: 22_500.0,
            start_ts: 1_000_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowTuple {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub sport: u16,
    pub dport: u16,
}

fn pick(pool: (Ipv4Addr, u32), rng: &mut ChaCha8Rng) -> Ipv4Addr {
    Ipv4Addr::from(u32::from(pool.0).wrapping_add(rng.gen_range(0..pool.1.max(1))))
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), TrafficError> {
        if self.flows == 0 {
            return Err(TrafficError::InvalidSpec("at least one flow is required".into()));
        }
        if !(MIN_PACKET_SIZE..=MAX_PACKET_SIZE).contains(&self.packet_size) {
            return Err(TrafficError::InvalidSpec(format!(
                "packet size {} outside {MIN_PACKET_SIZE}..={MAX_PACKET_SIZE}",
                self.packet_size
            )));
        }
        if !(self.rate_pps.is_finite() && self.rate_pps > 0.0) {
            return Err(TrafficError::InvalidSpec(format!("rate {} must be positive", self.rate_pps)));
        }
        Ok(())
    }

    /// The flow tuples, fixed by the seed. Source ports are distinct.
    pub fn flow_table(&self) -> Vec<FlowTuple> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut flows: Vec<FlowTuple> = Vec::with_capacity(self.flows);
        while flows.len() < self.flows {
            let sport = rng.gen_range(1024..=65535);
            let t = FlowTuple {
                src: pick(self.src_pool, &mut rng),
                dst: pick(self.dst_pool, &mut rng),
                sport,
                dport: IPERF_PORT,
            };
            if flows.iter().all(|f| f.sport != sport) {
                flows.push(t);
            }
        }
        flows
    }

    pub fn flow_of(&self, index: u64) -> usize {
        (index % self.flows as u64) as usize
    }

    pub fn generate(&self, count: u64) -> Result<SyntheticSource, TrafficError> {
        self.validate()?;
        let frames = self
            .flow_table()
            .into_iter()
            .map(|f| {
                ipv4_frame(
                    [0x02, 0, 0, 0, 0, 1],
                    [0x02, 0, 0, 0, 0, 2],
                    f.src,
                    f.dst,
                    L4::Udp { sport: f.sport, dport: f.dport },
                    self.packet_size,
                )
            })
            .collect();
        Ok(SyntheticSource { frames, next: 0, count, start: self.start_ts, gap_us: 1e6 / self.rate_pps })
    }
}

/// Round-robin over the flows with evenly spaced timestamps.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    frames: Vec<Vec<u8>>,
    next: u64,
    count: u64,
    start: u64,
    gap_us: f64,
}

impl Iterator for SyntheticSource {
    type Item = (u64, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let i = self.next;
        self.next += 1;
        let ts = self.start + (i as f64 * self.gap_us).round() as u64;
        Some((ts, self.frames[(i % self.frames.len() as u64) as usize].clone()))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.count - self.next) as usize;
        (n, Some(n))
    }
}

/// One attacking source sending SYNs at a fixed rate for a while.
#[derive(Debug, Clone, PartialEq)]
pub struct SynAttack {
    pub src: Ipv4Addr,
    pub rate_pps: f64,
    pub start_s: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynFloodSpec {
    pub duration_s: f64,
    /// Benign packets per second across all benign hosts.
    pub benign_pps: f64,
    pub benign_hosts: u32,
    pub packet_size: usize,
    pub attack: Option<SynAttack>,
    pub start_ts: u64,
    pub seed: u64,
}

impl Default for SynFloodSpec {
    fn default() -> Self {
        SynFloodSpec {
            duration_s: 10.0,
            benign_pps: 2_000.0,
            benign_hosts: 200,
            packet_size: 100,
            attack: Some(SynAttack {
                src: Ipv4Addr::new(203, 0, 113, 66),
                rate_pps: 400.0,
                start_s: 3.0,
                duration_s: 2.0,
            }),
            start_ts: 1_000_000,
            seed: 7,
        }
    }
}

const SYN: u8 = 0x02;
const ACK: u8 = 0x10;
const PSH: u8 = 0x08;

/// Benign hosts mix UDP datagrams with TCP handshakes and data segments,
/// so each host opens only a handful of connections per second. The attack,
/// if any, adds bare SYNs from one source.
pub fn synflood_trace(spec: &SynFloodSpec) -> Vec<(u64, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let server = Ipv4Addr::new(192, 168, 10, 1);
    let mac_a = [0x02, 0, 0, 0, 0, 0xa];
    let mac_b = [0x02, 0, 0, 0, 0, 0xb];
    let size = spec.packet_size.max(MIN_PACKET_SIZE);
    let mut out: Vec<(u64, u64, Vec<u8>)> = Vec::new();
    let span_us = (spec.duration_s * 1e6) as u64;
    let n_benign = (spec.benign_pps * spec.duration_s).round() as u64;
    let hosts = spec.benign_hosts.max(1);
    for i in 0..n_benign {
        let ts = spec.start_ts + rng.gen_range(0..span_us.max(1));
        let h = rng.gen_range(0..hosts);
        let host = Ipv4Addr::new(172, 16, (h / 250) as u8, (h % 250 + 1) as u8);
        let sport = rng.gen_range(1024..=65535);
        let frame = match rng.gen_range(0..10) {
            0 => ipv4_frame(mac_a, mac_b, host, server, L4::Tcp { sport, dport: 443, flags: SYN }, size),
            1 => ipv4_frame(mac_b, mac_a, server, host, L4::Tcp { sport: 443, dport: sport, flags: SYN | ACK }, size),
            2..=5 => ipv4_frame(mac_a, mac_b, host, server, L4::Tcp { sport, dport: 443, flags: ACK | PSH }, size),
            _ => ipv4_frame(mac_a, mac_b, host, server, L4::Udp { sport, dport: 53 }, size),
        };
        out.push((ts, i, frame));
    }
    if let Some(a) = &spec.attack {
        let n = (a.rate_pps * a.duration_s).round() as u64;
        let t0 = spec.start_ts + (a.start_s * 1e6) as u64;
        for k in 0..n {
            let ts = t0 + (k as f64 * 1e6 / a.rate_pps) as u64;
            let sport = rng.gen_range(1024..=65535);
            let f = ipv4_frame(mac_a, mac_b, a.src, server, L4::Tcp { sport, dport: 80, flags: SYN }, size);
            out.push((ts, n_benign + k, f));
        }
    }
    out.sort_by_key(|(ts, i, _)| (*ts, *i));
    out.into_iter().map(|(ts, _, f)| (ts, f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::parse_packet;

    #[test]
    fn flows_cycle_round_robin() {
        let spec = SyntheticSpec::default();
        let table = spec.flow_table();
        let pkts: Vec<_> = spec.generate(8).unwrap().collect();
        for (i, (_, f)) in pkts.iter().enumerate() {
            let p = parse_packet(f, 0).unwrap();
            assert_eq!(p.l4_sport, table[spec.flow_of(i as u64)].sport);
            assert_eq!(f.len(), 100);
        }
        let flows: Vec<usize> = (0..8).map(|i| spec.flow_of(i)).collect();
        assert_eq!(flows, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a: Vec<_> = SyntheticSpec::default().generate(100).unwrap().collect();
        let b: Vec<_> = SyntheticSpec::default().generate(100).unwrap().collect();
        assert_eq!(a, b);
        let c: Vec<_> = SyntheticSpec { seed: 2, ..Default::default() }.generate(100).unwrap().collect();
        assert_ne!(a, c);
    }

    #[test]
    fn gaps_follow_the_rate() {
        let spec = SyntheticSpec { rate_pps: 1000.0, ..Default::default() };
        let ts: Vec<u64> = spec.generate(5).unwrap().map(|x| x.0).collect();
        assert_eq!(ts, vec![1_000_000, 1_001_000, 1_002_000, 1_003_000, 1_004_000]);
    }

    #[test]
    fn invalid_specs() {
        assert!(SyntheticSpec { packet_size: 63, ..Default::default() }.validate().is_err());
        assert!(SyntheticSpec { flows: 0, ..Default::default() }.validate().is_err());
        assert!(SyntheticSpec { rate_pps: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn flood_trace_is_sorted_and_sized() {
        let t = synflood_trace(&SynFloodSpec { duration_s: 2.0, ..Default::default() });
        assert!(t.windows(2).all(|w| w[0].0 <= w[1].0));
        assert!(t.iter().all(|(_, f)| f.len() == 100));
        assert_eq!(t, synflood_trace(&SynFloodSpec { duration_s: 2.0, ..Default::default() }));
    }
}
