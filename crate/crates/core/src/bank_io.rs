//! Filter bank files: a packed binary blob plus a JSON descriptor.
//!
//! Blob layout (all integers little-endian):
//!   magic  "STEP" (4 bytes)
//!   version u8 = 1
//!   shape   h, w, k, f as four u32
//!   family  u8 (0 cs-lbp, 1 haar, 2 random-binary)
//!   seed    u64
//!   bits    ceil(h*w*k*f / 4) bytes, 2-bit packed elements
//!
//! The descriptor carries the same identity fields in JSON together with
//! the per-kernel draw records, which make every kernel replayable without
//! the PRNG.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};
use crate::packed::PackedTernary;
use crate::pattern::{BankShape, FilterBank, GenRecord, KernelFamily};

pub const BANK_MAGIC: &[u8; 4] = b"STEP";
pub const BANK_VERSION: u8 = 1;

/// Serialize a bank to its blob bytes.
pub fn bank_to_bytes(bank: &FilterBank) -> Vec<u8> {
    let s = bank.shape();
    let mut out = Vec::with_capacity(25 + bank.packed().bytes().len());
    out.extend_from_slice(BANK_MAGIC);
    out.push(BANK_VERSION);
    for dim in [s.h, s.w, s.in_channels, s.filters] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.push(bank.family().code());
    out.extend_from_slice(&bank.seed().to_le_bytes());
    out.extend_from_slice(bank.packed().bytes());
    out
}

/// Parse blob bytes back into a bank (draw records are not part of the
/// blob; attach them from a descriptor if needed).
pub fn bank_from_bytes(bytes: &[u8]) -> Result<FilterBank> {
    if bytes.len() < 30 {
        return Err(StepError::Format("bank blob truncated".into()));
    }
    if &bytes[0..4] != BANK_MAGIC {
        return Err(StepError::Format("bad bank magic".into()));
    }
    if bytes[4] != BANK_VERSION {
        return Err(StepError::Format(format!("unsupported bank version {}", bytes[4])));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 5 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let family = KernelFamily::from_code(bytes[21])?;
    let seed = u64::from_le_bytes(bytes[22..30].try_into().unwrap());
    let shape = BankShape::new(dims[0], dims[1], dims[2], dims[3]);
    let expected = shape.element_count().div_ceil(4);
    let bits = &bytes[30..];
    if bits.len() != expected {
        return Err(StepError::Format(format!(
            "bank blob holds {} packed bytes, shape needs {expected}",
            bits.len()
        )));
    }
    let packed = PackedTernary::from_bytes(shape.element_count(), bits.to_vec())?;
    FilterBank::from_parts(shape, family, seed, packed, vec![])
}

pub fn write_bank(path: &Path, bank: &FilterBank) -> Result<()> {
    Ok(std::fs::write(path, bank_to_bytes(bank))?)
}

pub fn read_bank(path: &Path) -> Result<FilterBank> {
    bank_from_bytes(&std::fs::read(path)?)
}

/// JSON sidecar: identity, sparsity and the per-kernel draw records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankDescriptor {
    pub shape: BankShape,
    pub family: KernelFamily,
    pub seed: u64,
    pub sparsity: f64,
    pub kernels: Vec<GenRecord>,
}

impl BankDescriptor {
    pub fn describe(bank: &FilterBank) -> Self {
        Self {
            shape: bank.shape(),
            family: bank.family(),
            seed: bank.seed(),
            sparsity: bank.sparsity(),
            kernels: bank.records().to_vec(),
        }
    }
}

pub fn write_descriptor(path: &Path, bank: &FilterBank) -> Result<()> {
    let descriptor = BankDescriptor::describe(bank);
    let json = serde_json::to_string_pretty(&descriptor)
        .map_err(|e| StepError::Format(format!("descriptor encode: {e}")))?;
    Ok(std::fs::write(path, json)?)
}

pub fn read_descriptor(path: &Path) -> Result<BankDescriptor> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| StepError::Format(format!("descriptor decode: {e}")))
}

/// Reunite a blob-loaded bank with its descriptor's draw records.
pub fn attach_records(bank: FilterBank, descriptor: &BankDescriptor) -> Result<FilterBank> {
    if bank.shape() != descriptor.shape
        || bank.family() != descriptor.family
        || bank.seed() != descriptor.seed
    {
        return Err(StepError::Format("descriptor does not match bank".into()));
    }
    let rebuilt = FilterBank::from_parts(
        bank.shape(),
        bank.family(),
        bank.seed(),
        bank.packed().clone(),
        descriptor.kernels.clone(),
    )?;
    rebuilt.verify_replay()?;
    Ok(rebuilt)
}
