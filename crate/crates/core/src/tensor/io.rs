//! Tensor blob format: one JSON header line `{"name","shape","dtype"}`
//! followed by the values as little-endian `f32`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<tensor stream>", e)
}

pub fn write_tensor<T: Real, W: Write>(w: &mut W, name: &str, tensor: &Tensor<T>) -> Result<()> {
    let header = BlobHeader {
        name: name.to_string(),
        shape: tensor.shape().to_vec(),
        dtype: "f32".into(),
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::json("tensor header", e))?;
    w.write_all(line.as_bytes()).map_err(io_err)?;
    w.write_all(b"\n").map_err(io_err)?;
    let mut bytes = Vec::with_capacity(tensor.numel() * 4);
    for &v in tensor.data() {
        bytes.extend_from_slice(&(v.widen() as f32).to_le_bytes());
    }
    w.write_all(&bytes).map_err(io_err)
}

/// Reads the next blob, or `None` at a clean end of stream.
pub fn read_tensor<T: Real, R: BufRead>(r: &mut R) -> Result<Option<(String, Tensor<T>)>> {
    let mut line = String::new();
    if r.read_line(&mut line).map_err(io_err)? == 0 {
        return Ok(None);
    }
    let header: BlobHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::json("tensor header", e))?;
    if header.dtype != "f32" {
        return Err(Error::Data(format!(
            "tensor {} has unsupported dtype {}",
            header.name, header.dtype
        )));
    }
    let numel: usize = header.shape.iter().product();
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Data(format!("tensor {} truncated: {e}", header.name)))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok(Some((header.name, Tensor::new(header.shape, data)?)))
}

pub fn read_all<T: Real, R: BufRead>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::new();
    while let Some(entry) = read_tensor(r)? {
        out.push(entry);
    }
    Ok(out)
}
