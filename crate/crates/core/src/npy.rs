//! Minimal reader and writer for `.npy` files holding little-endian `f64` arrays.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"\x93NUMPY";

pub fn write_npy(path: &Path, t: &Tensor) -> Result<()> {
    let shape = match t.shape() {
        [n] => format!("({n},)"),
        s => format!("({})", s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    // magic + version + length field + header + newline is a multiple of 64
    let used = MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - used % 64) % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + 8 * t.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&[1, 0]);
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_npy(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.len() < 10 || &bytes[..6] != MAGIC || bytes[6] != 1 {
        return Err(invalid(format!("{} is not a version 1 .npy file", path.display())));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(|| invalid("truncated .npy header"))?)
        .map_err(|_| invalid("non-UTF-8 .npy header"))?;
    if !header.contains("'<f8'") || header.contains("'fortran_order': True") {
        return Err(invalid("only C-ordered little-endian f64 arrays are supported"));
    }
    let open = header.find("'shape': (").ok_or_else(|| invalid("missing shape"))? + 10;
    let close = open + header[open..].find(')').ok_or_else(|| invalid("missing shape"))?;
    let shape = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| invalid(format!("bad dimension `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f64> = bytes[10 + hlen..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::from_vec(&shape, data)
}
