//! Binary container shared by datasets and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SDNC" | u32 version | u64 header_len | header (UTF-8 JSON)
//! u64 block_count | { u64 len | len * f64 } * block_count
//! u32 crc32 of every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDNC";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<H: Serialize>(header: &H, blocks: &[&[f64]]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let payload: usize = blocks.iter().map(|b| 8 + 8 * b.len()).sum();
    let mut buf = Vec::with_capacity(4 + 4 + 8 + header.len() + 8 + payload + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(blocks.len() as u64).to_le_bytes());
    for block in blocks {
        buf.extend_from_slice(&(block.len() as u64).to_le_bytes());
        for v in *block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of container".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<Vec<f64>>)> {
    if bytes.len() < 4 + 4 + 8 + 8 + 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a container file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut cur = Cursor { bytes: body, pos: 8 };
    let header_len = cur.u64()? as usize;
    let header: H = serde_json::from_slice(cur.take(header_len)?)?;
    let count = cur.u64()? as usize;
    let mut blocks = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = cur.u64()? as usize;
        let raw = cur.take(len.checked_mul(8).ok_or_else(|| Error::Format("block too large".into()))?)?;
        blocks.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    if cur.pos != body.len() {
        return Err(Error::Format("trailing bytes after last block".into()));
    }
    Ok((header, blocks))
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save<H: Serialize>(path: &Path, header: &H, blocks: &[&[f64]]) -> Result<()> {
    write_atomic(path, &encode(header, blocks)?)
}

pub fn load<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<Vec<f64>>)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip() {
        let a = [1.0, -2.5, f64::MIN_POSITIVE];
        let b: [f64; 0] = [];
        let bytes = encode(&json!({"k": 1}), &[&a, &b]).unwrap();
        let (h, blocks): (serde_json::Value, _) = decode(&bytes).unwrap();
        assert_eq!(h["k"], 1);
        assert_eq!(blocks, vec![a.to_vec(), vec![]]);
    }

    #[test]
    fn detects_corruption_and_version() {
        let mut bytes = encode(&json!({}), &[&[1.0, 2.0]]).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0x01;
        assert!(matches!(decode::<serde_json::Value>(&bytes), Err(Error::Checksum { .. })));

        let mut bytes = encode(&json!({}), &[&[1.0]]).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode::<serde_json::Value>(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
        assert!(matches!(decode::<serde_json::Value>(b"nope"), Err(Error::Format(_))));
    }
}
