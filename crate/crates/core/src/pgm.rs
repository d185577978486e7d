//! Binary PGM (P5) export of ternary kernels.
//!
//! Value map: -1 -> 0, 0 -> 128, +1 -> 255. One image per
//! (filter, channel), named `f{i}_c{j}.pgm`.

use std::path::{Path, PathBuf};

use crate::error::{Result, StepError};
use crate::pattern::{FilterBank, TernaryKernel};

pub fn ternary_to_byte(v: i8) -> u8 {
    match v {
        -1 => 0,
        0 => 128,
        _ => 255,
    }
}

pub fn byte_to_ternary(b: u8) -> Result<i8> {
    match b {
        0 => Ok(-1),
        128 => Ok(0),
        255 => Ok(1),
        other => Err(StepError::Format(format!("pixel {other} is not a ternary level"))),
    }
}

pub fn encode_pgm(kernel: &TernaryKernel) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", kernel.width(), kernel.height()).into_bytes();
    out.extend(kernel.values().iter().map(|&v| ternary_to_byte(v)));
    out
}

/// Minimal P5 reader, sufficient for our own exports.
pub fn decode_pgm(bytes: &[u8]) -> Result<TernaryKernel> {
    let header_err = || StepError::Format("not a P5 pgm produced by this tool".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        // Skip whitespace between header fields.
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(header_err());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?);
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(header_err());
    }
    let w: usize = fields[1].parse().map_err(|_| header_err())?;
    let h: usize = fields[2].parse().map_err(|_| header_err())?;
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(header_err)?;
    let values = pixels.iter().map(|&b| byte_to_ternary(b)).collect::<Result<Vec<_>>>()?;
    TernaryKernel::from_values(h, w, values)
}

/// Write one PGM per kernel of the bank; returns the created paths.
pub fn export_kernels_pgm(bank: &FilterBank, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let shape = bank.shape();
    let mut paths = Vec::with_capacity(shape.kernel_count());
    for f in 0..shape.filters {
        for c in 0..shape.in_channels {
            let kernel = bank.kernel(f, c)?;
            let path = dir.join(format!("f{f}_c{c}.pgm"));
            std::fs::write(&path, encode_pgm(&kernel))?;
            paths.push(path);
        }
    }
    Ok(paths)
}
