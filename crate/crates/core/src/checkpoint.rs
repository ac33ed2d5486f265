//! Binary checkpoint container: little-endian named matrices with a trailing
//! SHA-256 digest.
//!
//! Layout: `"SSFT"`, version `u32`, entry count `u32`, then per entry the name
//! length `u32`, UTF-8 name, rows `u32`, cols `u32` and `rows·cols` `f64`
//! values, then 32 digest bytes over everything before them.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffcore::Matrix;
use crate::error::{Result, SsftError};

pub const MAGIC: &[u8; 4] = b"SSFT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn encode(entries: &[(String, Matrix)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, m) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SsftError::Schema(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Matrix)>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(SsftError::Schema(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(SsftError::Version {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(SsftError::Checksum(path.to_path_buf()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(SsftError::Checksum(path.to_path_buf()));
    }
    let mut r = Reader {
        bytes: body,
        pos: 8,
    };
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| SsftError::Schema("checkpoint entry name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if r.pos != body.len() {
        return Err(SsftError::Schema(format!(
            "{} trailing bytes after the last entry",
            body.len() - r.pos
        )));
    }
    Ok(entries)
}

/// Writes through a temporary sibling so a crash never leaves a torn file.
pub fn write(path: &Path, entries: &[(String, Matrix)]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SsftError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(entries)).map_err(|e| SsftError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| SsftError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let bytes = fs::read(path).map_err(|e| SsftError::io(path, e))?;
    decode(&bytes, path)
}
