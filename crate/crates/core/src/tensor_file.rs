//! Flat little-endian `f64` payload behind a JSON header.
//!
//! Layout: `b"SLGD"`, `u32` version, `u64` header length, header bytes
//! (UTF-8 JSON), then the payload as consecutive `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SLGD";
const VERSION: u32 = 1;

pub fn write<H: Serialize>(path: impl AsRef<Path>, header: &H, payload: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let header = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for v in payload {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read<H: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(H, Vec<f64>)> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(io)?;
    if u32::from_le_bytes(u32b) != VERSION {
        return Err(bad("unsupported version"));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(io)?;
    let header_len = u64::from_le_bytes(u64b) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(io)?;
    let header: H = serde_json::from_slice(&header)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if rest.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let payload = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, payload))
}
