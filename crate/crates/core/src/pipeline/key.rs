//! Entity keys: canonical byte encodings of selected packet fields.

use serde::{Deserialize, Serialize};
use std::fmt;

use super::packet::{format_field, parse_field_text, Direction, Field, PacketView};
use super::PipelineError;

/// Identity of a monitored entity. The event index is part of the identity,
/// so equal bytes produced by different events never alias.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityKey {
    pub event_index: u32,
    pub key_bytes: Vec<u8>,
}

impl EntityKey {
    pub fn new(event_index: u32, key_bytes: Vec<u8>) -> Self {
        EntityKey { event_index, key_bytes }
    }
}

impl fmt::Display for EntityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.event_index)?;
        for b in &self.key_bytes {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// An ordered field-selector list, optionally normalized so that both
/// directions of a conversation yield the same key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeySpec {
    pub fields: Vec<Field>,
    pub bidirectional: bool,
}

impl KeySpec {
    pub fn new(fields: Vec<Field>) -> Self {
        KeySpec { fields, bidirectional: false }
    }

    pub fn bidirectional(fields: Vec<Field>) -> Self {
        KeySpec { fields, bidirectional: true }
    }

    /// Total encoded width in bytes.
    pub fn width(&self) -> usize {
        self.fields.iter().map(|f| f.width()).sum()
    }

    /// Checks that a bidirectional selector list pairs every directional
    /// field with its counterpart. Returns the offending field otherwise.
    pub fn check_pairs(&self) -> Result<(), Field> {
        if !self.bidirectional {
            return Ok(());
        }
        let mut any = false;
        for f in &self.fields {
            if let Some(c) = f.counterpart() {
                any = true;
                if !self.fields.contains(&c) {
                    return Err(*f);
                }
            }
        }
        if any {
            Ok(())
        } else {
            Err(self.fields.first().copied().unwrap_or(Field::IpSrc))
        }
    }

    /// Field order of the encoded bytes.
    pub fn layout(&self) -> Vec<Field> {
        if !self.bidirectional {
            return self.fields.clone();
        }
        let (src, others) = self.split();
        let mut out = src.clone();
        out.extend(src.iter().filter_map(|f| f.counterpart()));
        out.extend(others);
        out
    }

    fn split(&self) -> (Vec<Field>, Vec<Field>) {
        let src = self.fields.iter().copied().filter(|f| f.direction() == Direction::Src).collect();
        let others = self.fields.iter().copied().filter(|f| f.direction() == Direction::None).collect();
        (src, others)
    }

    /// Append the canonical encoding to `out`.
    pub fn encode(&self, pkt: &PacketView, out: &mut Vec<u8>) -> Result<(), PipelineError> {
        let missing = |f: Field| PipelineError::MissingLayer(f);
        if !self.bidirectional {
            for f in &self.fields {
                pkt.encode_field(*f, out).ok_or(missing(*f))?;
            }
            return Ok(());
        }
        let (src, others) = self.split();
        let mut a = Vec::with_capacity(16);
        let mut b = Vec::with_capacity(16);
        for f in &src {
            pkt.encode_field(*f, &mut a).ok_or(missing(*f))?;
            let c = f.counterpart().expect("src field has counterpart");
            pkt.encode_field(c, &mut b).ok_or(missing(c))?;
        }
        if b < a {
            std::mem::swap(&mut a, &mut b);
        }
        out.extend_from_slice(&a);
        out.extend_from_slice(&b);
        for f in &others {
            pkt.encode_field(*f, out).ok_or(missing(*f))?;
        }
        Ok(())
    }

    /// Human-readable rendering of encoded key bytes, fields joined by `,`.
    pub fn format(&self, bytes: &[u8]) -> String {
        let mut parts = Vec::new();
        let mut off = 0;
        for f in self.layout() {
            let w = f.width();
            if off + w > bytes.len() {
                break;
            }
            parts.push(format_field(f, &bytes[off..off + w]));
            off += w;
        }
        parts.join(",")
    }

    /// Inverse of [`KeySpec::format`] for plain (non-normalized) keys.
    pub fn parse_text(&self, text: &str) -> Option<Vec<u8>> {
        let layout = self.layout();
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() != layout.len() {
            return None;
        }
        let mut out = Vec::with_capacity(self.width());
        for (f, p) in layout.iter().zip(parts) {
            out.extend(parse_field_text(*f, p)?);
        }
        Some(out)
    }
}

impl fmt::Display for KeySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.fields.iter().map(|x| x.name()).collect();
        f.write_str(&names.join(", "))
    }
}

/// Derive the entity key for `event_index` from a packet.
pub fn derive_key(pkt: &PacketView, spec: &KeySpec, event_index: u32) -> Result<EntityKey, PipelineError> {
    let mut bytes = Vec::with_capacity(spec.width());
    spec.encode(pkt, &mut bytes)?;
    Ok(EntityKey::new(event_index, bytes))
}
