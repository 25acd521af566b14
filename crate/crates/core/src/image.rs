// SPDX-License-Identifier: Apache-2.0

//! Checkpoint image file format.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "IBCR"
//! 4       2     version (1)
//! 6       2     flags (0)
//! 8       4     node_id
//! 12      4     epoch
//! 16      2     section count N
//! 18      2     reserved (0)
//! 20      32*N  section table
//! 20+32N  4     crc32 of bytes [0, 20+32N)
//! ...           section payloads, in table order
//! ```
//!
//! Section table entry:
//!
//! ```text
//! 0   1  kind      1 MEMORY, 2 RESOURCE_LOG, 3 WQE_LOG, 4 DRAINED_CQ,
//!                  5 TRANSLATION, 6 WORKLOAD_STATE
//! 1   1  flags     bit 0: payload is raw deflate
//! 2   2  reserved
//! 4   8  offset    absolute file offset of the stored payload
//! 12  8  stored    stored payload length
//! 20  8  raw       payload length after inflation
//! 28  4  crc32     of the stored payload
//! ```
//!
//! The MEMORY payload is a u32 segment count followed by
//! `base: u64, len: u64, bytes[len]` per segment. WORKLOAD_STATE is opaque
//! bytes. The other sections hold UTF-8 JSON.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plugin::{ResourceSection, TranslationSection, VirtualCompletionQueue, WqeLog};

pub const MAGIC: &[u8; 4] = b"IBCR";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 20;
const ENTRY_LEN: usize = 32;
const FLAG_DEFLATE: u8 = 1;
/// Refuse to inflate sections claiming more than this.
const MAX_RAW: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum SectionKind {
    Memory = 1,
    ResourceLog = 2,
    WqeLog = 3,
    DrainedCq = 4,
    Translation = 5,
    WorkloadState = 6,
}

impl SectionKind {
    pub const ALL: [Self; 6] = [
        Self::Memory,
        Self::ResourceLog,
        Self::WqeLog,
        Self::DrainedCq,
        Self::Translation,
        Self::WorkloadState,
    ];

    fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySegment {
    pub base: u64,
    pub bytes: Vec<u8>,
}

/// Everything needed to bring one node back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeImage {
    pub node_id: u32,
    pub epoch: u32,
    pub memory: Vec<MemorySegment>,
    pub resources: ResourceSection,
    pub wqe_log: WqeLog,
    pub drained: VirtualCompletionQueue,
    pub translation: TranslationSection,
    pub workload_state: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImageStats {
    pub bytes_written: u64,
    pub sections: Vec<SectionStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SectionStats {
    pub kind: SectionKind,
    pub raw_len: u64,
    pub stored_len: u64,
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("writing image failed: {0}")]
    WriteFailed(#[source] std::io::Error),
    #[error("reading image failed: {0}")]
    ReadFailed(#[source] std::io::Error),
    #[error("unsupported image: {0}")]
    UnsupportedImage(String),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
}

fn corrupt(msg: impl Into<String>) -> ImageError {
    ImageError::CorruptImage(msg.into())
}

fn encode_memory(segs: &[MemorySegment]) -> Vec<u8> {
    let total: usize = segs.iter().map(|s| 16 + s.bytes.len()).sum();
    let mut out = Vec::with_capacity(4 + total);
    out.extend_from_slice(&(segs.len() as u32).to_le_bytes());
    for s in segs {
        out.extend_from_slice(&s.base.to_le_bytes());
        out.extend_from_slice(&(s.bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&s.bytes);
    }
    out
}

fn decode_memory(buf: &[u8]) -> Result<Vec<MemorySegment>, ImageError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ImageError> {
        let end = pos.checked_add(n).filter(|e| *e <= buf.len()).ok_or_else(|| corrupt("memory section truncated"))?;
        let s = &buf[pos..end];
        pos = end;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    let mut segs = Vec::new();
    for _ in 0..count {
        let base = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| corrupt("segment too large"))?;
        segs.push(MemorySegment {
            base,
            bytes: take(len)?.to_vec(),
        });
    }
    if pos != buf.len() {
        return Err(corrupt("trailing bytes in memory section"));
    }
    Ok(segs)
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("image sections serialize")
}

fn from_json<T: for<'de> Deserialize<'de>>(kind: SectionKind, b: &[u8]) -> Result<T, ImageError> {
    serde_json::from_slice(b).map_err(|e| corrupt(format!("{kind:?}: {e}")))
}

fn deflate(raw: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(raw).expect("in-memory write");
    enc.finish().expect("in-memory write")
}

fn inflate(stored: &[u8], raw_len: u64) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::with_capacity(raw_len as usize);
    DeflateDecoder::new(stored)
        .take(raw_len + 1)
        .read_to_end(&mut out)
        .map_err(|e| corrupt(format!("inflate: {e}")))?;
    Ok(out)
}

/// Serializes an image into the on-disk layout.
pub fn encode_image(img: &NodeImage, compress: bool) -> (Vec<u8>, ImageStats) {
    let raw: Vec<(SectionKind, Vec<u8>)> = vec![
        (SectionKind::Memory, encode_memory(&img.memory)),
        (SectionKind::ResourceLog, json(&img.resources)),
        (SectionKind::WqeLog, json(&img.wqe_log)),
        (SectionKind::DrainedCq, json(&img.drained)),
        (SectionKind::Translation, json(&img.translation)),
        (SectionKind::WorkloadState, img.workload_state.clone()),
    ];
    let n = raw.len();
    let mut offset = (HEADER_LEN + ENTRY_LEN * n + 4) as u64;
    let mut table = Vec::with_capacity(ENTRY_LEN * n);
    let mut payloads = Vec::with_capacity(n);
    let mut stats = ImageStats::default();
    for (kind, bytes) in raw {
        let (stored, flags) = if compress {
            (deflate(&bytes), FLAG_DEFLATE)
        } else {
            (bytes.clone(), 0)
        };
        table.push(kind as u8);
        table.push(flags);
        table.extend_from_slice(&[0, 0]);
        table.extend_from_slice(&offset.to_le_bytes());
        table.extend_from_slice(&(stored.len() as u64).to_le_bytes());
        table.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        table.extend_from_slice(&crc32fast::hash(&stored).to_le_bytes());
        stats.sections.push(SectionStats {
            kind,
            raw_len: bytes.len() as u64,
            stored_len: stored.len() as u64,
        });
        offset += stored.len() as u64;
        payloads.push(stored);
    }
    let mut out = Vec::with_capacity(offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&img.node_id.to_le_bytes());
    out.extend_from_slice(&img.epoch.to_le_bytes());
    out.extend_from_slice(&(n as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&table);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    for p in payloads {
        out.extend_from_slice(&p);
    }
    stats.bytes_written = out.len() as u64;
    (out, stats)
}

/// Parses and verifies an encoded image.
pub fn decode_image(buf: &[u8]) -> Result<NodeImage, ImageError> {
    if buf.len() < HEADER_LEN {
        return Err(corrupt("truncated header"));
    }
    if &buf[..4] != MAGIC {
        return Err(ImageError::UnsupportedImage("bad magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().expect("8 bytes"));
    let version = u16_at(4);
    if version != VERSION {
        return Err(ImageError::UnsupportedImage(format!("version {version}")));
    }
    let n = u16_at(16) as usize;
    let table_end = HEADER_LEN + ENTRY_LEN * n;
    if buf.len() < table_end + 4 {
        return Err(corrupt("truncated section table"));
    }
    if crc32fast::hash(&buf[..table_end]) != u32_at(table_end) {
        return Err(corrupt("header checksum mismatch"));
    }
    if u16_at(6) != 0 || u16_at(18) != 0 {
        return Err(ImageError::UnsupportedImage("unknown header flags".into()));
    }
    let node_id = u32_at(8);
    let epoch = u32_at(12);
    let mut sections: Vec<(SectionKind, Vec<u8>)> = Vec::with_capacity(n);
    for i in 0..n {
        let e = HEADER_LEN + ENTRY_LEN * i;
        let kind = SectionKind::from_u8(buf[e])
            .ok_or_else(|| ImageError::UnsupportedImage(format!("section kind {}", buf[e])))?;
        let flags = buf[e + 1];
        if flags & !FLAG_DEFLATE != 0 || u16_at(e + 2) != 0 {
            return Err(ImageError::UnsupportedImage("unknown section flags".into()));
        }
        let (off, stored, raw) = (u64_at(e + 4), u64_at(e + 12), u64_at(e + 20));
        let start = usize::try_from(off).map_err(|_| corrupt("offset"))?;
        let end = off
            .checked_add(stored)
            .and_then(|x| usize::try_from(x).ok())
            .filter(|x| *x <= buf.len() && start >= table_end + 4)
            .ok_or_else(|| corrupt(format!("{kind:?} out of bounds")))?;
        let payload = &buf[start..end];
        if crc32fast::hash(payload) != u32_at(e + 28) {
            return Err(corrupt(format!("{kind:?} checksum mismatch")));
        }
        if raw > MAX_RAW {
            return Err(corrupt(format!("{kind:?} too large")));
        }
        let bytes = if flags & FLAG_DEFLATE != 0 {
            inflate(payload, raw)?
        } else {
            payload.to_vec()
        };
        if bytes.len() as u64 != raw {
            return Err(corrupt(format!("{kind:?} length mismatch")));
        }
        sections.push((kind, bytes));
    }
    let expected_end = sections.len();
    let take = |kind: SectionKind| -> Result<&Vec<u8>, ImageError> {
        let mut it = sections.iter().filter(|(k, _)| *k == kind);
        match (it.next(), it.next()) {
            (Some((_, b)), None) => Ok(b),
            (None, _) => Err(corrupt(format!("missing {kind:?}"))),
            _ => Err(corrupt(format!("duplicate {kind:?}"))),
        }
    };
    if expected_end != SectionKind::ALL.len() {
        return Err(corrupt(format!("{expected_end} sections")));
    }
    Ok(NodeImage {
        node_id,
        epoch,
        memory: decode_memory(take(SectionKind::Memory)?)?,
        resources: from_json(SectionKind::ResourceLog, take(SectionKind::ResourceLog)?)?,
        wqe_log: from_json(SectionKind::WqeLog, take(SectionKind::WqeLog)?)?,
        drained: from_json(SectionKind::DrainedCq, take(SectionKind::DrainedCq)?)?,
        translation: from_json(SectionKind::Translation, take(SectionKind::Translation)?)?,
        workload_state: take(SectionKind::WorkloadState)?.clone(),
    })
}

/// Writes `img` to `path` via a temporary file and rename.
pub fn write_image(img: &NodeImage, path: &Path, compress: bool) -> Result<ImageStats, ImageError> {
    let (bytes, stats) = encode_image(img, compress);
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(ImageError::WriteFailed)?;
    Ok(stats)
}

pub fn read_image(path: &Path) -> Result<NodeImage, ImageError> {
    let bytes = fs::read(path).map_err(ImageError::ReadFailed)?;
    decode_image(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::NodeAddr;
    use crate::plugin::{NodePlugin, PluginConfig};

    fn idle(node: u32) -> NodeImage {
        let p = NodePlugin::new(node, NodeAddr::new(node, 0), PluginConfig::default());
        NodeImage {
            node_id: node,
            epoch: 0,
            memory: vec![],
            resources: p.resource_section(),
            wqe_log: p.wqe_log().clone(),
            drained: p.drained().clone(),
            translation: p.translation_section(),
            workload_state: vec![],
        }
    }

    #[test]
    fn idle_round_trip_and_empty_sections() {
        let img = idle(3);
        let (bytes, stats) = encode_image(&img, false);
        assert_eq!(&bytes[..4], b"IBCR");
        assert_eq!(stats.sections.len(), 6);
        let back = decode_image(&bytes).unwrap();
        assert_eq!(back, img);
        assert!(back.wqe_log.is_empty());
        assert!(back.drained.is_empty());
    }

    #[test]
    fn header_layout() {
        let (b, _) = encode_image(&idle(7), true);
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 7);
        assert_eq!(u16::from_le_bytes([b[16], b[17]]), 6);
        // first payload starts right after the table and its checksum
        let off = u64::from_le_bytes(b[24..32].try_into().unwrap());
        assert_eq!(off as usize, 20 + 6 * 32 + 4);
        assert_eq!(b[21], 1);
    }

    #[test]
    fn version_bump_is_unsupported() {
        let (mut b, _) = encode_image(&idle(1), false);
        b[4] = 2;
        assert!(matches!(decode_image(&b), Err(ImageError::UnsupportedImage(_))));
        b[0] = b'X';
        assert!(matches!(decode_image(&b), Err(ImageError::UnsupportedImage(_))));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let mut img = idle(1);
        img.workload_state = vec![9; 100];
        let (b, _) = encode_image(&img, true);
        for cut in [b.len() - 1, b.len() / 2, 30, 10] {
            assert!(matches!(decode_image(&b[..cut]), Err(ImageError::CorruptImage(_))));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("node0.img");
        let mut img = idle(0);
        img.memory.push(MemorySegment {
            base: 0x1000_0000,
            bytes: (0..=255).collect(),
        });
        let stats = write_image(&img, &path, true).unwrap();
        assert_eq!(stats.bytes_written, fs::metadata(&path).unwrap().len());
        assert_eq!(read_image(&path).unwrap(), img);
        assert!(matches!(
            write_image(&img, &dir.path().join("missing/x.img"), true),
            Err(ImageError::WriteFailed(_))
        ));
    }
}
