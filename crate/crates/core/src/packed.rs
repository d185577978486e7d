//! 2-bit packed storage for ternary sequences.
//!
//! Encoding per element: `00` → 0, `01` → +1, `10` → -1, `11` → reserved.
//! Four elements per byte in little-element order: element `i` occupies bits
//! `2*(i % 4)` of byte `i / 4`. Trailing fields of the last byte are zero on
//! encode and ignored on decode.

use crate::error::{Result, StepError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTernary {
    len: usize,
    bits: Vec<u8>,
}

fn encode(v: i8, index: usize) -> Result<u8> {
    match v {
        0 => Ok(0b00),
        1 => Ok(0b01),
        -1 => Ok(0b10),
        other => Err(StepError::NonTernary(other, index)),
    }
}

fn decode(code: u8, index: usize) -> Result<i8> {
    match code {
        0b00 => Ok(0),
        0b01 => Ok(1),
        0b10 => Ok(-1),
        _ => Err(StepError::Corrupt(format!("reserved ternary code 11 at element {index}"))),
    }
}

impl PackedTernary {
    pub fn pack(values: &[i8]) -> Result<Self> {
        let mut bits = vec![0u8; values.len().div_ceil(4)];
        for (i, &v) in values.iter().enumerate() {
            bits[i / 4] |= encode(v, i)? << (2 * (i % 4));
        }
        Ok(Self { len: values.len(), bits })
    }

    pub fn unpack(&self) -> Result<Vec<i8>> {
        self.unpack_range(0, self.len)
    }

    pub fn unpack_range(&self, start: usize, count: usize) -> Result<Vec<i8>> {
        if start + count > self.len {
            return Err(StepError::ShapeMismatch(format!(
                "range {start}..{} exceeds packed length {}",
                start + count,
                self.len
            )));
        }
        (start..start + count).map(|i| self.get(i)).collect()
    }

    pub fn get(&self, i: usize) -> Result<i8> {
        assert!(i < self.len, "packed index {i} out of range");
        decode((self.bits[i / 4] >> (2 * (i % 4))) & 0b11, i)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bits
    }

    /// Rebuild from raw bytes, e.g. a bank blob payload. Every used field is
    /// decoded once so a reserved code fails here, not at first use.
    pub fn from_bytes(len: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != len.div_ceil(4) {
            return Err(StepError::Format(format!(
                "packed buffer of {} bytes cannot hold {len} elements",
                bits.len()
            )));
        }
        let packed = Self { len, bits };
        for i in 0..len {
            packed.get(i)?;
        }
        Ok(packed)
    }
}
