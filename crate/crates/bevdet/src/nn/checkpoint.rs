//! Parameter checkpoint files.
//!
//! Layout: magic `BDCK1`, u32 entry count, then per entry a u16 name
//! length + name, u8 rank, u32 dims, and a little-endian f32 payload.
//! The file ends with a u64 FNV-1a checksum of all preceding bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"BDCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn save_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        assert!(name.len() <= u16::MAX as usize, "parameter name too long");
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        assert!(e.shape.len() <= u8::MAX as usize);
        buf.push(e.shape.len() as u8);
        let mut len = 1usize;
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
            len *= d;
        }
        assert_eq!(len, e.data.len(), "checkpoint entry {} shape/data mismatch", e.name);
        for &v in &e.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Checkpoint(format!("{}: file too short", path.display())));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", path.display())));
    }
    if &body[..5] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }

    let mut pos = 5;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::Checkpoint(format!("{}: truncated entry", path.display())));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: non-utf8 name", path.display())))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            shape.push(d);
            len *= d;
        }
        let raw = take(&mut pos, len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push(CheckpointEntry { name, shape, data });
    }
    if pos != body.len() {
        return Err(Error::Checkpoint(format!("{}: trailing bytes", path.display())));
    }
    Ok(entries)
}
