// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint container: magic, format version, a JSON header, then
//! tensors as `ndims u32, dims u64.., data f64..`, all little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const VERSION: u32 = 1;

/// Writes `header` and `tensors` under a 4-byte `magic` tag.
pub fn write_checkpoint<H: Serialize>(
    path: &Path,
    magic: &[u8; 4],
    header: &H,
    tensors: &[&Tensor],
) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let size: usize = tensors
        .iter()
        .map(|t| 8 + 8 * t.rank() + 8 * t.numel())
        .sum();
    let mut buf = Vec::with_capacity(16 + json.len() + size);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Reads a checkpoint written by [`write_checkpoint`] with the same `magic`.
pub fn read_checkpoint<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 4],
) -> Result<(H, Vec<Tensor>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor {
        path,
        bytes: &bytes,
        at: 0,
    };
    if c.take(4)? != magic {
        return Err(Error::format(path, "bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let json_len = c.u64()? as usize;
    let header: H = serde_json::from_slice(c.take(json_len)?)?;
    let n = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(8 * numel)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?);
    }
    if c.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok((header, tensors))
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let a = Tensor::matrix(2, 3, vec![1.0, -0.0, 1e-300, 3.5, f64::MAX, -7.25]).unwrap();
        let b = Tensor::vector(vec![0.1]).unwrap();
        write_checkpoint(&path, b"TEST", &("hello", 3), &[&a, &b]).unwrap();
        let (h, ts): ((String, u32), _) = read_checkpoint(&path, b"TEST").unwrap();
        assert_eq!(h, ("hello".to_string(), 3));
        assert_eq!(ts.len(), 2);
        for (x, y) in ts.iter().zip([&a, &b]) {
            assert_eq!(x.shape(), y.shape());
            let bx: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
        assert!(matches!(
            read_checkpoint::<(String, u32)>(&path, b"NOPE"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let a = Tensor::vector(vec![1.0, 2.0]).unwrap();
        write_checkpoint(&path, b"TEST", &0u8, &[&a]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_checkpoint::<u8>(&path, b"TEST"),
            Err(Error::Format { .. })
        ));
    }
}
