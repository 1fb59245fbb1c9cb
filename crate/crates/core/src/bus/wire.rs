//! Length-prefixed framing shared by the bus (`DSM1`) and control (`DSC1`)
//! channels, plus the bit-exact bus message layout.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{valid_topic, BusMessage};

pub const BUS_MAGIC: [u8; 4] = *b"DSM1";
pub const FRAME_HEADER_LEN: usize = 8;
/// Upper bound on the length field; larger frames are rejected unread.
pub const MAX_FRAME_LEN: u32 = 16 << 20;
/// Fixed bytes inside a bus frame body: topic length, probe id length, seq, ts.
const FIXED_BODY_LEN: usize = 2 + 2 + 8 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("frame length {0} exceeds the {MAX_FRAME_LEN} byte limit")]
    TooLarge(u32),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("malformed frame: {0}")]
    Malformed(String),
}

/// Prefix `body` with `magic` and its big-endian length.
pub fn frame(magic: [u8; 4], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

pub fn write_frame(w: &mut impl Write, magic: [u8; 4], body: &[u8]) -> io::Result<()> {
    w.write_all(&magic)?;
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)
}

/// Read one whole frame body from a blocking reader. Returns `Ok(None)` on a
/// clean end of stream before the first header byte.
pub fn read_frame(r: &mut impl Read, magic: [u8; 4]) -> io::Result<Option<Vec<u8>>> {
    let mut hdr = [0u8; FRAME_HEADER_LEN];
    let mut got = 0;
    while got < hdr.len() {
        match r.read(&mut hdr[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = check_header(&hdr, magic).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

fn check_header(hdr: &[u8], magic: [u8; 4]) -> Result<usize, WireError> {
    let m: [u8; 4] = hdr[0..4].try_into().unwrap();
    if m != magic {
        return Err(WireError::BadMagic(m));
    }
    let len = u32::from_be_bytes(hdr[4..8].try_into().unwrap());
    if len > MAX_FRAME_LEN {
        return Err(WireError::TooLarge(len));
    }
    Ok(len as usize)
}

/// Accumulates stream bytes and splits them into frames. Works with
/// non-blocking or timed-out reads since partial frames stay buffered.
#[derive(Debug)]
pub struct FrameBuffer {
    magic: [u8; 4],
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn new(magic: [u8; 4]) -> Self {
        FrameBuffer { magic, buf: Vec::new() }
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame (header included), if buffered.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>, WireError> {
        if self.buf.len() < FRAME_HEADER_LEN {
            return Ok(None);
        }
        let len = check_header(&self.buf[..FRAME_HEADER_LEN], self.magic)?;
        let total = FRAME_HEADER_LEN + len;
        if self.buf.len() < total {
            return Ok(None);
        }
        let rest = self.buf.split_off(total);
        Ok(Some(std::mem::replace(&mut self.buf, rest)))
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }
}

/// Encode a bus message as one `DSM1` frame.
pub fn encode_message(msg: &BusMessage) -> Vec<u8> {
    let t = msg.topic.as_bytes();
    let p = msg.probe_id.as_bytes();
    let mut body = Vec::with_capacity(FIXED_BODY_LEN + t.len() + p.len() + msg.payload.len());
    body.extend_from_slice(&(t.len() as u16).to_be_bytes());
    body.extend_from_slice(t);
    body.extend_from_slice(&(p.len() as u16).to_be_bytes());
    body.extend_from_slice(p);
    body.extend_from_slice(&msg.seq.to_be_bytes());
    body.extend_from_slice(&msg.ts.to_be_bytes());
    body.extend_from_slice(&msg.payload);
    frame(BUS_MAGIC, &body)
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.b.len() - self.pos < n {
            return Err(WireError::Malformed(format!(
                "field of {n} bytes overruns the frame at offset {}",
                self.pos + FRAME_HEADER_LEN
            )));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Malformed(format!("{what} is not UTF-8")))
    }
}

/// Decode exactly one `DSM1` frame.
pub fn decode_message(frame: &[u8]) -> Result<BusMessage, WireError> {
    if frame.len() < FRAME_HEADER_LEN {
        return Err(WireError::Truncated { needed: FRAME_HEADER_LEN, have: frame.len() });
    }
    let len = check_header(&frame[..FRAME_HEADER_LEN], BUS_MAGIC)?;
    let have = frame.len() - FRAME_HEADER_LEN;
    if have < len {
        return Err(WireError::Truncated { needed: FRAME_HEADER_LEN + len, have: frame.len() });
    }
    if have > len {
        return Err(WireError::TrailingBytes(have - len));
    }
    if len < FIXED_BODY_LEN {
        return Err(WireError::Malformed(format!("frame length {len} is below the {FIXED_BODY_LEN} fixed bytes")));
    }
    let mut r = Reader { b: &frame[FRAME_HEADER_LEN..], pos: 0 };
    let topic = r.text("topic")?;
    if !valid_topic(&topic) {
        return Err(WireError::Malformed(format!("invalid topic {topic:?}")));
    }
    let probe_id = r.text("probe id")?;
    let seq = r.u64()?;
    let ts = r.u64()?;
    let payload = r.b[r.pos..].to_vec();
    Ok(BusMessage { topic, probe_id, seq, ts, payload })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn status() -> BusMessage {
        BusMessage {
            topic: "status".into(),
            probe_id: "p1".into(),
            seq: 1,
            ts: 42,
            payload: br#"{"kind":"status"}"#.to_vec(),
        }
    }

    #[test]
    fn layout_is_bit_exact() {
        let f = encode_message(&status());
        assert_eq!(&f[0..4], &[0x44, 0x53, 0x4d, 0x31]);
        let l = u32::from_be_bytes(f[4..8].try_into().unwrap()) as usize;
        assert_eq!(l, f.len() - 8);
        assert_eq!(&f[8..10], &[0, 6]);
        assert_eq!(&f[10..16], b"status");
        assert_eq!(&f[16..18], &[0, 2]);
        assert_eq!(&f[18..20], b"p1");
        assert_eq!(&f[20..28], &1u64.to_be_bytes());
        assert_eq!(&f[28..36], &42u64.to_be_bytes());
        assert_eq!(f.len() - 36, l - 6 - 2 - 20);
    }

    #[test]
    fn minimal_round_trip_and_bad_magic() {
        let f = encode_message(&status());
        assert_eq!(decode_message(&f).unwrap(), status());
        let mut g = f.clone();
        g[3] = b'2';
        assert_eq!(decode_message(&g), Err(WireError::BadMagic(*b"DSM2")));
        assert!(matches!(decode_message(&f[..f.len() - 1]), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn frame_buffer_reassembles_split_frames() {
        let a = encode_message(&status());
        let mut b = status();
        b.seq = 2;
        let b = encode_message(&b);
        let stream: Vec<u8> = a.iter().chain(b.iter()).copied().collect();
        let mut fb = FrameBuffer::new(BUS_MAGIC);
        let mut out = Vec::new();
        for chunk in stream.chunks(5) {
            fb.extend(chunk);
            while let Some(f) = fb.next_frame().unwrap() {
                out.push(f);
            }
        }
        assert_eq!(out, vec![a, b]);
    }

    proptest! {
        #[test]
        fn random_frames_never_crash(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_message(&bytes);
            let mut f = BUS_MAGIC.to_vec();
            f.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            f.extend_from_slice(&bytes);
            if let Ok(m) = decode_message(&f) {
                prop_assert_eq!(encode_message(&m), f);
            }
        }
    }
}
