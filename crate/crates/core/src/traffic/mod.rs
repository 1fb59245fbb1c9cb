//! Packet sources and the throughput harness: classic pcap files,
//! deterministic synthetic traffic, paced replay and replicated benchmarks.

mod bench;
mod pcap;
mod replay;
mod synth;

pub use bench::{bench, BenchReport, BenchRow, Estimate};
pub use pcap::{
    read_pcap, read_pcap_all, write_pcap, PcapHeader, PcapReader, PcapRecord, PcapWriter, TimestampUnit,
    LINKTYPE_ETHERNET, MAGIC_MICROS, MAGIC_NANOS,
};
pub use replay::{replay, Rate, ReplayMode, ReplayPlan, RunStats, SUSTAINABLE_FRACTION};
pub use synth::{synflood_trace, FlowTuple, SynAttack, SynFloodSpec, SyntheticSource, SyntheticSpec};

use thiserror::Error;

use crate::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a pcap file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("unsupported link type {0} (only Ethernet is supported)")]
    UnsupportedLinktype(u32),
    #[error("pcap global header truncated at {0} bytes")]
    TruncatedHeader(usize),
    #[error("record {index} truncated: need {needed} bytes, have {have}")]
    TruncatedRecord { index: u64, needed: usize, have: usize },
    #[error("invalid traffic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}
