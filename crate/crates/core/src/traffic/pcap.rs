//! Classic pcap files (not pcapng), Ethernet link type only.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::TrafficError;

pub const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
pub const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;
pub const DEFAULT_SNAPLEN: u32 = 65_535;
/// Records claiming more captured bytes than this are treated as corrupt.
const MAX_RECORD_LEN: u32 = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestampUnit {
    Micros,
    Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcapHeader {
    pub big_endian: bool,
    pub unit: TimestampUnit,
    pub version_major: u16,
    pub version_minor: u16,
    pub snaplen: u32,
    pub linktype: u32,
}

impl PcapHeader {
    pub fn new(unit: TimestampUnit) -> Self {
        PcapHeader {
            big_endian: false,
            unit,
            version_major: 2,
            version_minor: 4,
            snaplen: DEFAULT_SNAPLEN,
            linktype: LINKTYPE_ETHERNET,
        }
    }

    pub fn parse(b: &[u8; GLOBAL_HEADER_LEN]) -> Result<Self, TrafficError> {
        let le = u32::from_le_bytes(b[0..4].try_into().unwrap());
        let be = u32::from_be_bytes(b[0..4].try_into().unwrap());
        let (big_endian, unit) = match (le, be) {
            (MAGIC_MICROS, _) => (false, TimestampUnit::Micros),
            (MAGIC_NANOS, _) => (false, TimestampUnit::Nanos),
            (_, MAGIC_MICROS) => (true, TimestampUnit::Micros),
            (_, MAGIC_NANOS) => (true, TimestampUnit::Nanos),
            _ => return Err(TrafficError::BadMagic(le)),
        };
        let u16_at = |i: usize| {
            let x: [u8; 2] = b[i..i + 2].try_into().unwrap();
            if big_endian {
                u16::from_be_bytes(x)
            } else {
                u16::from_le_bytes(x)
            }
        };
        let u32_at = |i: usize| {
            let x: [u8; 4] = b[i..i + 4].try_into().unwrap();
            if big_endian {
                u32::from_be_bytes(x)
            } else {
                u32::from_le_bytes(x)
            }
        };
        let h = PcapHeader {
            big_endian,
            unit,
            version_major: u16_at(4),
            version_minor: u16_at(6),
            snaplen: u32_at(16),
            linktype: u32_at(20),
        };
        if h.linktype != LINKTYPE_ETHERNET {
            return Err(TrafficError::UnsupportedLinktype(h.linktype));
        }
        Ok(h)
    }

    pub fn to_bytes(&self) -> [u8; GLOBAL_HEADER_LEN] {
        let mut out = [0u8; GLOBAL_HEADER_LEN];
        let magic = match self.unit {
            TimestampUnit::Micros => MAGIC_MICROS,
            TimestampUnit::Nanos => MAGIC_NANOS,
        };
        let mut w = Vec::with_capacity(GLOBAL_HEADER_LEN);
        let be = self.big_endian;
        let p32 = |w: &mut Vec<u8>, v: u32| w.extend_from_slice(&if be { v.to_be_bytes() } else { v.to_le_bytes() });
        let p16 = |w: &mut Vec<u8>, v: u16| w.extend_from_slice(&if be { v.to_be_bytes() } else { v.to_le_bytes() });
        p32(&mut w, magic);
        p16(&mut w, self.version_major);
        p16(&mut w, self.version_minor);
        p32(&mut w, 0);
        p32(&mut w, 0);
        p32(&mut w, self.snaplen);
        p32(&mut w, self.linktype);
        out.copy_from_slice(&w);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapRecord {
    /// Microseconds since the epoch.
    pub ts: u64,
    /// Original length on the wire.
    pub orig_len: u32,
    pub data: Vec<u8>,
}

impl PcapRecord {
    pub fn new(ts: u64, data: Vec<u8>) -> Self {
        PcapRecord { ts, orig_len: data.len() as u32, data }
    }
}

/// Streams records in file order. After an error the iterator is exhausted.
#[derive(Debug)]
pub struct PcapReader<R> {
    inner: R,
    header: PcapHeader,
    index: u64,
    done: bool,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, TrafficError> {
        let mut b = [0u8; GLOBAL_HEADER_LEN];
        let got = read_full(&mut inner, &mut b)?;
        if got < GLOBAL_HEADER_LEN {
            return Err(TrafficError::TruncatedHeader(got));
        }
        let header = PcapHeader::parse(&b)?;
        Ok(PcapReader { inner, header, index: 0, done: false })
    }

    pub fn header(&self) -> &PcapHeader {
        &self.header
    }

    fn next_record(&mut self) -> Result<Option<PcapRecord>, TrafficError> {
        let mut h = [0u8; RECORD_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut h)?;
        if got == 0 {
            return Ok(None);
        }
        if got < RECORD_HEADER_LEN {
            return Err(TrafficError::TruncatedRecord { index: self.index, needed: RECORD_HEADER_LEN, have: got });
        }
        let be = self.header.big_endian;
        let f = |i: usize| {
            let x: [u8; 4] = h[i..i + 4].try_into().unwrap();
            if be {
                u32::from_be_bytes(x)
            } else {
                u32::from_le_bytes(x)
            }
        };
        let (sec, frac, incl, orig) = (f(0) as u64, f(4) as u64, f(8), f(12));
        if incl > MAX_RECORD_LEN {
            return Err(TrafficError::TruncatedRecord { index: self.index, needed: incl as usize, have: 0 });
        }
        let mut data = vec![0u8; incl as usize];
        let got = read_full(&mut self.inner, &mut data)?;
        if got < data.len() {
            return Err(TrafficError::TruncatedRecord { index: self.index, needed: data.len(), have: got });
        }
        let ts = sec * 1_000_000
            + match self.header.unit {
                TimestampUnit::Micros => frac,
                TimestampUnit::Nanos => frac / 1000,
            };
        self.index += 1;
        Ok(Some(PcapRecord { ts, orig_len: orig, data }))
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<PcapRecord, TrafficError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

pub fn read_pcap(path: impl AsRef<Path>) -> Result<PcapReader<BufReader<File>>, TrafficError> {
    PcapReader::new(BufReader::new(File::open(path)?))
}

/// Read a whole file. A truncated tail is reported after the complete records.
pub fn read_pcap_all(path: impl AsRef<Path>) -> Result<(Vec<PcapRecord>, Option<TrafficError>), TrafficError> {
    let mut records = Vec::new();
    for r in read_pcap(path)? {
        match r {
            Ok(r) => records.push(r),
            Err(e) => return Ok((records, Some(e))),
        }
    }
    Ok((records, None))
}

#[derive(Debug)]
pub struct PcapWriter<W: Write> {
    inner: W,
    header: PcapHeader,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W, header: PcapHeader) -> Result<Self, TrafficError> {
        inner.write_all(&header.to_bytes())?;
        Ok(PcapWriter { inner, header })
    }

    pub fn write(&mut self, rec: &PcapRecord) -> Result<(), TrafficError> {
        let be = self.header.big_endian;
        let sec = (rec.ts / 1_000_000) as u32;
        let frac = match self.header.unit {
            TimestampUnit::Micros => (rec.ts % 1_000_000) as u32,
            TimestampUnit::Nanos => (rec.ts % 1_000_000) as u32 * 1000,
        };
        for v in [sec, frac, rec.data.len() as u32, rec.orig_len] {
            self.inner.write_all(&if be { v.to_be_bytes() } else { v.to_le_bytes() })?;
        }
        self.inner.write_all(&rec.data)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, TrafficError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_pcap<'a>(
    path: impl AsRef<Path>,
    header: PcapHeader,
    records: impl IntoIterator<Item = &'a PcapRecord>,
) -> Result<(), TrafficError> {
    let mut w = PcapWriter::new(BufWriter::new(File::create(path)?), header)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()?;
    Ok(())
}
