//! On-disk formats: the "CGA1" tensor file, the "CGCK" checkpoint container,
//! JSON helpers, and the FNV-1a hash used for config hashes and parameter
//! checksums. All writes go through a temp file and rename, so readers never
//! observe partial files.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const TENSOR_MAGIC: &[u8; 4] = b"CGA1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0x01;

/// Serialize a tensor: magic, dtype byte (0x01 = f32), rank byte, rank
/// little-endian u64 extents, row-major little-endian payload.
pub fn tensor_to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse a tensor from the front of `bytes`; returns the tensor and the
/// number of bytes consumed.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<(Tensor<f32>, usize)> {
    if bytes.len() < 6 {
        return Err(Error::format("tensor blob truncated"));
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::format("bad tensor magic"));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(Error::format(format!("unsupported dtype code 0x{:02x}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let mut offset = 6;
    if bytes.len() < offset + 8 * rank {
        return Err(Error::format("tensor header truncated"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[offset..offset + 8]);
        shape.push(u64::from_le_bytes(buf) as usize);
        offset += 8;
    }
    let numel: usize = shape.iter().product();
    if bytes.len() < offset + 4 * numel {
        return Err(Error::format("tensor payload truncated"));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[offset + 4 * i..offset + 4 * i + 4]);
        data.push(f32::from_le_bytes(buf));
    }
    offset += 4 * numel;
    Ok((Tensor::new(&shape, data)?, offset))
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &tensor_to_bytes(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut bytes)?;
    let (t, consumed) = tensor_from_bytes(&bytes)?;
    if consumed != bytes.len() {
        return Err(Error::format(format!("{}: trailing bytes", path.display())));
    }
    Ok(t)
}

/// Write a checkpoint: versioned header, configuration echoed as JSON, and
/// named tensors (sorted by name so the file is byte-deterministic).
pub fn write_checkpoint(
    path: &Path,
    config_json: &str,
    tensors: &[(String, Tensor<f32>)],
) -> Result<()> {
    let mut sorted: Vec<&(String, Tensor<f32>)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(sorted.len() as u64).to_le_bytes());
    for (name, tensor) in sorted {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&tensor_to_bytes(tensor));
    }
    write_atomic(path, &out)
}

pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<(String, Tensor<f32>)>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(format!("{}: not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let mut offset = 8usize;
    let read_u64 = |bytes: &[u8], offset: &mut usize| -> Result<u64> {
        if bytes.len() < *offset + 8 {
            return Err(Error::format("checkpoint truncated"));
        }
        let v = u64::from_le_bytes(bytes[*offset..*offset + 8].try_into().unwrap());
        *offset += 8;
        Ok(v)
    };
    let config_len = read_u64(&bytes, &mut offset)? as usize;
    if bytes.len() < offset + config_len {
        return Err(Error::format("checkpoint truncated in config"));
    }
    let config_json = String::from_utf8(bytes[offset..offset + config_len].to_vec())
        .map_err(|_| Error::format("checkpoint config is not UTF-8"))?;
    offset += config_len;
    let count = read_u64(&bytes, &mut offset)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&bytes, &mut offset)? as usize;
        if bytes.len() < offset + name_len {
            return Err(Error::format("checkpoint truncated in name"));
        }
        let name = String::from_utf8(bytes[offset..offset + name_len].to_vec())
            .map_err(|_| Error::format("checkpoint name is not UTF-8"))?;
        offset += name_len;
        let (tensor, consumed) = tensor_from_bytes(&bytes[offset..])?;
        offset += consumed;
        tensors.push((name, tensor));
    }
    if offset != bytes.len() {
        return Err(Error::format("checkpoint has trailing bytes"));
    }
    Ok((config_json, tensors))
}

/// FNV-1a 64-bit hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Checksum over named tensors (names and f32 bit patterns); order-insensitive
/// input, deterministic output.
pub fn params_checksum(entries: &[(String, Tensor<f32>)]) -> u64 {
    let mut sorted: Vec<&(String, Tensor<f32>)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut bytes = Vec::new();
    for (name, tensor) in sorted {
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(0);
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    fnv1a(&bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("json encode: {e}")))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: json decode: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
