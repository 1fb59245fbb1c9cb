//! Ethernet II / IPv4 / TCP / UDP / ICMP frame parsing into a flat field record.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::net::Ipv4Addr;

use super::PipelineError;

pub const ETH_HEADER_LEN: usize = 14;
pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const PROTO_ICMP: u8 = 1;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

/// Protocol layers whose headers were complete and well-formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Layers(u8);

impl Layers {
    pub const L2: Layers = Layers(1);
    pub const L3: Layers = Layers(2);
    pub const L4: Layers = Layers(4);

    pub fn contains(self, other: Layers) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn insert(&mut self, other: Layers) {
        self.0 |= other.0;
    }
}

/// Parsed view of one captured frame. Fields of layers not in `valid_layers`
/// hold zero and are never exposed through [`PacketView::field`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PacketView {
    pub capture_ts: u64,
    pub wire_len: u32,
    pub eth_src: [u8; 6],
    pub eth_dst: [u8; 6],
    pub eth_type: u16,
    pub ip_src: u32,
    pub ip_dst: u32,
    pub ip_proto: u8,
    pub ip_len: u16,
    pub l4_sport: u16,
    pub l4_dport: u16,
    pub tcp_flags: u8,
    pub icmp_type: u8,
    pub icmp_code: u8,
    pub payload_len: u32,
    pub valid_layers: Layers,
    /// Set when an IPv4 header was present but inconsistent with the captured bytes.
    pub malformed_l3: bool,
}

/// Parse a raw Ethernet frame. Never reads past `frame.len()`.
pub fn parse_packet(frame: &[u8], ts: u64) -> Result<PacketView, PipelineError> {
    if frame.len() < ETH_HEADER_LEN {
        return Err(PipelineError::TruncatedFrame(frame.len()));
    }
    let mut pkt = PacketView { capture_ts: ts, wire_len: frame.len() as u32, ..Default::default() };
    pkt.eth_dst.copy_from_slice(&frame[0..6]);
    pkt.eth_src.copy_from_slice(&frame[6..12]);
    pkt.eth_type = u16::from_be_bytes([frame[12], frame[13]]);
    pkt.valid_layers.insert(Layers::L2);
    pkt.payload_len = (frame.len() - ETH_HEADER_LEN) as u32;

    if pkt.eth_type != ETHERTYPE_IPV4 {
        return Ok(pkt);
    }
    let ip = &frame[ETH_HEADER_LEN..];
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        pkt.malformed_l3 = true;
        return Ok(pkt);
    }
    let ihl = ((ip[0] & 0x0f) as usize) * 4;
    let total_len = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    if ihl < 20 || total_len < ihl || total_len > ip.len() || ihl > ip.len() {
        pkt.malformed_l3 = true;
        return Ok(pkt);
    }
    pkt.ip_len = total_len as u16;
    pkt.ip_proto = ip[9];
    pkt.ip_src = u32::from_be_bytes([ip[12], ip[13], ip[14], ip[15]]);
    pkt.ip_dst = u32::from_be_bytes([ip[16], ip[17], ip[18], ip[19]]);
    pkt.valid_layers.insert(Layers::L3);
    pkt.payload_len = (total_len - ihl) as u32;

    // Only the first fragment carries the transport header.
    let frag_offset = u16::from_be_bytes([ip[6], ip[7]]) & 0x1fff;
    if frag_offset != 0 {
        return Ok(pkt);
    }
    let l4 = &ip[ihl..total_len];
    match pkt.ip_proto {
        PROTO_TCP if l4.len() >= 20 => {
            let data_off = ((l4[12] >> 4) as usize) * 4;
            if data_off < 20 || data_off > l4.len() {
                return Ok(pkt);
            }
            pkt.l4_sport = u16::from_be_bytes([l4[0], l4[1]]);
            pkt.l4_dport = u16::from_be_bytes([l4[2], l4[3]]);
            pkt.tcp_flags = l4[13];
            pkt.payload_len = (l4.len() - data_off) as u32;
            pkt.valid_layers.insert(Layers::L4);
        }
        PROTO_UDP if l4.len() >= 8 => {
            pkt.l4_sport = u16::from_be_bytes([l4[0], l4[1]]);
            pkt.l4_dport = u16::from_be_bytes([l4[2], l4[3]]);
            pkt.payload_len = (l4.len() - 8) as u32;
            pkt.valid_layers.insert(Layers::L4);
        }
        PROTO_ICMP if l4.len() >= 8 => {
            pkt.icmp_type = l4[0];
            pkt.icmp_code = l4[1];
            pkt.payload_len = (l4.len() - 8) as u32;
            pkt.valid_layers.insert(Layers::L4);
        }
        _ => {}
    }
    Ok(pkt)
}

/// Packet field selectors available to event predicates, keys and expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Field {
    EthSrc,
    EthDst,
    EthType,
    IpSrc,
    IpDst,
    IpProto,
    IpLen,
    L4Sport,
    L4Dport,
    TcpFlags,
    IcmpType,
    IcmpCode,
    FrameLen,
    PayloadLen,
}

/// Which side of a conversation a field describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Src,
    Dst,
    None,
}

impl Field {
    pub const ALL: [Field; 14] = [
        Field::EthSrc,
        Field::EthDst,
        Field::EthType,
        Field::IpSrc,
        Field::IpDst,
        Field::IpProto,
        Field::IpLen,
        Field::L4Sport,
        Field::L4Dport,
        Field::TcpFlags,
        Field::IcmpType,
        Field::IcmpCode,
        Field::FrameLen,
        Field::PayloadLen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::EthSrc => "eth.src",
            Field::EthDst => "eth.dst",
            Field::EthType => "eth.type",
            Field::IpSrc => "ip.src",
            Field::IpDst => "ip.dst",
            Field::IpProto => "ip.proto",
            Field::IpLen => "ip.len",
            Field::L4Sport => "l4.sport",
            Field::L4Dport => "l4.dport",
            Field::TcpFlags => "tcp.flags",
            Field::IcmpType => "icmp.type",
            Field::IcmpCode => "icmp.code",
            Field::FrameLen => "frame.len",
            Field::PayloadLen => "payload.len",
        }
    }

    pub fn from_name(name: &str) -> Option<Field> {
        let f = match name {
            "eth.src" => Field::EthSrc,
            "eth.dst" => Field::EthDst,
            "eth.type" => Field::EthType,
            "ip.src" => Field::IpSrc,
            "ip.dst" => Field::IpDst,
            "ip.proto" => Field::IpProto,
            "ip.len" => Field::IpLen,
            "l4.sport" | "l4_sport" | "tcp.sport" | "udp.sport" => Field::L4Sport,
            "l4.dport" | "l4_dport" | "tcp.dport" | "udp.dport" => Field::L4Dport,
            "tcp.flags" => Field::TcpFlags,
            "icmp.type" => Field::IcmpType,
            "icmp.code" => Field::IcmpCode,
            "frame.len" => Field::FrameLen,
            "payload.len" => Field::PayloadLen,
            _ => return None,
        };
        Some(f)
    }

    /// Encoded width in key bytes.
    pub fn width(self) -> usize {
        match self {
            Field::EthSrc | Field::EthDst => 6,
            Field::IpSrc | Field::IpDst | Field::FrameLen | Field::PayloadLen => 4,
            Field::EthType | Field::IpLen | Field::L4Sport | Field::L4Dport => 2,
            Field::IpProto | Field::TcpFlags | Field::IcmpType | Field::IcmpCode => 1,
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Field::EthSrc | Field::IpSrc | Field::L4Sport => Direction::Src,
            Field::EthDst | Field::IpDst | Field::L4Dport => Direction::Dst,
            _ => Direction::None,
        }
    }

    /// The opposite-direction counterpart, if any.
    pub fn counterpart(self) -> Option<Field> {
        match self {
            Field::EthSrc => Some(Field::EthDst),
            Field::EthDst => Some(Field::EthSrc),
            Field::IpSrc => Some(Field::IpDst),
            Field::IpDst => Some(Field::IpSrc),
            Field::L4Sport => Some(Field::L4Dport),
            Field::L4Dport => Some(Field::L4Sport),
            _ => None,
        }
    }

    /// The layer the field belongs to.
    pub fn layer(self) -> Layers {
        match self {
            Field::EthSrc | Field::EthDst | Field::EthType | Field::FrameLen | Field::PayloadLen => Layers::L2,
            Field::IpSrc | Field::IpDst | Field::IpProto | Field::IpLen => Layers::L3,
            _ => Layers::L4,
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl PacketView {
    /// Whether the field is readable on this packet.
    pub fn has(&self, field: Field) -> bool {
        if !self.valid_layers.contains(field.layer()) {
            return false;
        }
        match field {
            Field::L4Sport | Field::L4Dport => self.ip_proto == PROTO_TCP || self.ip_proto == PROTO_UDP,
            Field::TcpFlags => self.ip_proto == PROTO_TCP,
            Field::IcmpType | Field::IcmpCode => self.ip_proto == PROTO_ICMP,
            _ => true,
        }
    }

    /// Numeric value of a field, or `None` when its layer is absent.
    pub fn field(&self, field: Field) -> Option<u64> {
        if !self.has(field) {
            return None;
        }
        let v = match field {
            Field::EthSrc => mac_to_u64(&self.eth_src),
            Field::EthDst => mac_to_u64(&self.eth_dst),
            Field::EthType => self.eth_type as u64,
            Field::IpSrc => self.ip_src as u64,
            Field::IpDst => self.ip_dst as u64,
            Field::IpProto => self.ip_proto as u64,
            Field::IpLen => self.ip_len as u64,
            Field::L4Sport => self.l4_sport as u64,
            Field::L4Dport => self.l4_dport as u64,
            Field::TcpFlags => self.tcp_flags as u64,
            Field::IcmpType => self.icmp_type as u64,
            Field::IcmpCode => self.icmp_code as u64,
            Field::FrameLen => self.wire_len as u64,
            Field::PayloadLen => self.payload_len as u64,
        };
        Some(v)
    }

    /// Append the field's canonical network-order encoding to `out`.
    pub fn encode_field(&self, field: Field, out: &mut Vec<u8>) -> Option<()> {
        let v = self.field(field)?;
        let w = field.width();
        out.extend_from_slice(&v.to_be_bytes()[8 - w..]);
        Some(())
    }
}

fn mac_to_u64(mac: &[u8; 6]) -> u64 {
    let mut b = [0u8; 8];
    b[2..].copy_from_slice(mac);
    u64::from_be_bytes(b)
}

/// Render an encoded field value in its conventional textual form.
pub fn format_field(field: Field, bytes: &[u8]) -> String {
    match field {
        Field::IpSrc | Field::IpDst if bytes.len() == 4 => {
            Ipv4Addr::new(bytes[0], bytes[1], bytes[2], bytes[3]).to_string()
        }
        Field::EthSrc | Field::EthDst => bytes.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(":"),
        _ => {
            let mut v = 0u64;
            for b in bytes {
                v = (v << 8) | *b as u64;
            }
            v.to_string()
        }
    }
}

/// Inverse of [`format_field`]: parse a textual value into its encoding.
pub fn parse_field_text(field: Field, text: &str) -> Option<Vec<u8>> {
    let text = text.trim();
    match field {
        Field::IpSrc | Field::IpDst => {
            let ip: Ipv4Addr = text.parse().ok()?;
            Some(ip.octets().to_vec())
        }
        Field::EthSrc | Field::EthDst => {
            let parts: Vec<&str> = text.split(':').collect();
            if parts.len() != 6 {
                return None;
            }
            parts.iter().map(|p| u8::from_str_radix(p, 16).ok()).collect()
        }
        _ => {
            let v: u64 = text.parse().ok()?;
            let w = field.width();
            if w < 8 && v >> (8 * w) != 0 {
                return None;
            }
            Some(v.to_be_bytes()[8 - w..].to_vec())
        }
    }
}

/// Frame construction helpers shared by the traffic generators and tests.
pub mod build {
    use super::*;

    #[derive(Debug, Clone, Copy)]
    pub enum L4 {
        Udp { sport: u16, dport: u16 },
        Tcp { sport: u16, dport: u16, flags: u8 },
        Icmp { icmp_type: u8, code: u8 },
    }

    /// Build an Ethernet/IPv4 frame of exactly `frame_len` bytes (padded with
    /// zero payload). `frame_len` must cover all headers.
    pub fn ipv4_frame(
        eth_src: [u8; 6],
        eth_dst: [u8; 6],
        ip_src: Ipv4Addr,
        ip_dst: Ipv4Addr,
        l4: L4,
        frame_len: usize,
    ) -> Vec<u8> {
        let l4_hdr = match l4 {
            L4::Tcp { .. } => 20,
            L4::Udp { .. } | L4::Icmp { .. } => 8,
        };
        let min = ETH_HEADER_LEN + 20 + l4_hdr;
        let frame_len = frame_len.max(min);
        let mut f = vec![0u8; frame_len];
        f[0..6].copy_from_slice(&eth_dst);
        f[6..12].copy_from_slice(&eth_src);
        f[12..14].copy_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
        let ip_total = (frame_len - ETH_HEADER_LEN) as u16;
        let ip = &mut f[ETH_HEADER_LEN..];
        ip[0] = 0x45;
        ip[2..4].copy_from_slice(&ip_total.to_be_bytes());
        ip[8] = 64;
        ip[9] = match l4 {
            L4::Tcp { .. } => PROTO_TCP,
            L4::Udp { .. } => PROTO_UDP,
            L4::Icmp { .. } => PROTO_ICMP,
        };
        ip[12..16].copy_from_slice(&ip_src.octets());
        ip[16..20].copy_from_slice(&ip_dst.octets());
        let csum = ipv4_checksum(&ip[..20]);
        ip[10..12].copy_from_slice(&csum.to_be_bytes());
        let t = &mut ip[20..];
        match l4 {
            L4::Tcp { sport, dport, flags } => {
                t[0..2].copy_from_slice(&sport.to_be_bytes());
                t[2..4].copy_from_slice(&dport.to_be_bytes());
                t[12] = 5 << 4;
                t[13] = flags;
                t[14..16].copy_from_slice(&8192u16.to_be_bytes());
            }
            L4::Udp { sport, dport } => {
                t[0..2].copy_from_slice(&sport.to_be_bytes());
                t[2..4].copy_from_slice(&dport.to_be_bytes());
                let udp_len = (ip_total - 20).to_be_bytes();
                t[4..6].copy_from_slice(&udp_len);
            }
            L4::Icmp { icmp_type, code } => {
                t[0] = icmp_type;
                t[1] = code;
            }
        }
        f
    }

    pub fn arp_frame(eth_src: [u8; 6]) -> Vec<u8> {
        let mut f = vec![0u8; 42];
        f[0..6].copy_from_slice(&[0xff; 6]);
        f[6..12].copy_from_slice(&eth_src);
        f[12..14].copy_from_slice(&ETHERTYPE_ARP.to_be_bytes());
        f
    }

    fn ipv4_checksum(hdr: &[u8]) -> u16 {
        let mut sum = 0u32;
        for chunk in hdr.chunks(2) {
            sum += u16::from_be_bytes([chunk[0], chunk[1]]) as u32;
        }
        while sum >> 16 != 0 {
            sum = (sum & 0xffff) + (sum >> 16);
        }
        !(sum as u16)
    }
}
