//! Bit-exact sparse-model message format and communication-cost accounting.
//!
//! Layout, all integers little-endian:
//! `magic "FKLP" | version u16 | client_id u16 | round u16 |
//! pruning_ratio f32 | klaw_raw f32 | layer_count u16`, then per layer
//! `name_len u16 | name utf-8 | rank u8 | dims u32 x rank |
//! mask ceil(n/8) bytes | nonzero_count u32 | values f32 x nonzero_count`.
//! Mask bytes use little-endian bit order (bit 0 of byte 0 is coordinate 0)
//! and only the values of set bits are serialized.

use crate::agg::ClientReport;
use crate::error::{DecodeError, Error, Result};
use crate::params::{pruning_ratio, MaskLayer, ParamLayer, ParamVector, PruneMask};

pub const MAGIC: [u8; 4] = *b"FKLP";
pub const VERSION: u16 = 1;

/// Fixed header size in bytes.
pub const HEADER_LEN: usize = 4 + 2 + 2 + 2 + 4 + 4 + 2;

#[derive(Debug, Clone, PartialEq)]
pub struct MessageLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: Vec<bool>,
    /// Values of the set bits only, in coordinate order.
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseModelMessage {
    pub client_id: u16,
    pub round: u16,
    pub pruning_ratio: f32,
    pub klaw_raw: f32,
    pub layers: Vec<MessageLayer>,
}

impl SparseModelMessage {
    /// Builds a message from a client report, dropping the zeros that the
    /// mask already encodes. Errors when the declared ratio disagrees with
    /// the mask by more than one coordinate's worth.
    pub fn from_report(report: &ClientReport, round: u16) -> Result<SparseModelMessage> {
        report.mask.check_structure_params(&report.model)?;
        report.model.validate()?;
        let mask_ratio = pruning_ratio(&report.mask)?;
        let slack = 1.0 / report.mask.prunable_total() as f64 + 1e-6;
        if (f64::from(report.pruning_ratio) - mask_ratio).abs() > slack {
            return Err(Error::InvalidParameter(format!(
                "declared pruning ratio {} inconsistent with mask ratio {mask_ratio}",
                report.pruning_ratio
            )));
        }
        let layers = report
            .model
            .layers
            .iter()
            .zip(&report.mask.layers)
            .map(|(l, m)| MessageLayer {
                name: l.name.clone(),
                shape: l.shape.clone(),
                bits: m.bits.clone(),
                values: l
                    .values
                    .iter()
                    .zip(&m.bits)
                    .filter(|(_, &b)| b)
                    .map(|(&v, _)| v)
                    .collect(),
            })
            .collect();
        Ok(SparseModelMessage {
            client_id: report.client_id,
            round,
            pruning_ratio: report.pruning_ratio,
            klaw_raw: report.klaw_raw,
            layers,
        })
    }

    /// Reconstructs a dense report; masked coordinates become zero. Layers
    /// of rank >= 2 are prunable, rank-1 layers (biases) are not.
    pub fn to_report(&self, dataset_size: usize) -> Result<ClientReport> {
        let mut params = Vec::new();
        let mut masks = Vec::new();
        for l in &self.layers {
            let prunable = l.shape.len() >= 2;
            let mut values = vec![0.0f32; l.bits.len()];
            let mut vi = 0;
            for (c, &bit) in l.bits.iter().enumerate() {
                if bit {
                    values[c] = l.values[vi];
                    vi += 1;
                }
            }
            params.push(ParamLayer {
                name: l.name.clone(),
                shape: l.shape.clone(),
                values,
                prunable,
            });
            masks.push(MaskLayer {
                name: l.name.clone(),
                bits: l.bits.clone(),
                prunable,
            });
        }
        let model = ParamVector { layers: params };
        model.validate()?;
        Ok(ClientReport {
            client_id: self.client_id,
            model,
            mask: PruneMask { layers: masks },
            pruning_ratio: self.pruning_ratio,
            klaw_raw: self.klaw_raw,
            dataset_size,
        })
    }
}

pub fn encode(msg: &SparseModelMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&msg.client_id.to_le_bytes());
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&msg.pruning_ratio.to_le_bytes());
    out.extend_from_slice(&msg.klaw_raw.to_le_bytes());
    out.extend_from_slice(&(msg.layers.len() as u16).to_le_bytes());
    for l in &msg.layers {
        out.extend_from_slice(&(l.name.len() as u16).to_le_bytes());
        out.extend_from_slice(l.name.as_bytes());
        out.push(l.shape.len() as u8);
        for &d in &l.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let n = l.bits.len();
        let mut mask_bytes = vec![0u8; n.div_ceil(8)];
        for (i, &bit) in l.bits.iter().enumerate() {
            if bit {
                mask_bytes[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&mask_bytes);
        out.extend_from_slice(&(l.values.len() as u32).to_le_bytes());
        for v in &l.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], DecodeError> {
        if self.pos + n > self.bytes.len() {
            return Err(DecodeError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> std::result::Result<f32, DecodeError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> std::result::Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
}

/// Strict inverse of [`encode`]. Never panics on malformed input; every
/// defect maps to a distinct [`DecodeError`].
pub fn decode(bytes: &[u8]) -> std::result::Result<SparseModelMessage, DecodeError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u16()?;
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let client_id = cur.u16()?;
    let round = cur.u16()?;
    let pruning_ratio = cur.f32()?;
    let klaw_raw = cur.f32()?;
    let layer_count = cur.u16()?;

    let mut layers = Vec::with_capacity(layer_count as usize);
    for _ in 0..layer_count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| DecodeError::BadName)?
            .to_string();
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut n: u64 = 1;
        for _ in 0..rank {
            let d = cur.u32()? as u64;
            n = n.saturating_mul(d);
            shape.push(d as usize);
        }
        // bound before allocating: the mask alone must fit in what remains
        let mask_len = n.div_ceil(8);
        if mask_len > (bytes.len() - cur.pos) as u64 {
            return Err(DecodeError::Truncated);
        }
        let mask_bytes = cur.take(mask_len as usize)?;
        let mut bits = Vec::with_capacity(n as usize);
        for i in 0..n as usize {
            bits.push(mask_bytes[i / 8] & (1 << (i % 8)) != 0);
        }
        // padding bits beyond n must be zero for canonical round-trips
        if !n.is_multiple_of(8) {
            let last = mask_bytes[mask_bytes.len() - 1];
            if last >> (n % 8) != 0 {
                return Err(DecodeError::BadPadding);
            }
        }
        let nonzero = cur.u32()? as usize;
        let popcount = bits.iter().filter(|b| **b).count();
        if nonzero != popcount {
            return Err(DecodeError::PopcountMismatch);
        }
        if (nonzero as u64) * 4 > (bytes.len() - cur.pos) as u64 {
            return Err(DecodeError::Truncated);
        }
        let mut values = Vec::with_capacity(nonzero);
        for _ in 0..nonzero {
            values.push(cur.f32()?);
        }
        layers.push(MessageLayer {
            name,
            shape,
            bits,
            values,
        });
    }
    if cur.pos != bytes.len() {
        return Err(DecodeError::TrailingBytes);
    }
    Ok(SparseModelMessage {
        client_id,
        round,
        pruning_ratio,
        klaw_raw,
        layers,
    })
}

/// Raw dense parameter payload: four bytes per coordinate. This is what the
/// server broadcasts each round, and the per-round baseline the cost tables
/// compare against.
pub fn dense_model_bytes(p: &ParamVector) -> u64 {
    4 * p.total_len() as u64
}

/// Encoded size without building the byte vector.
pub fn encoded_len(msg: &SparseModelMessage) -> u64 {
    let mut len = HEADER_LEN as u64;
    for l in &msg.layers {
        len += 2 + l.name.len() as u64;
        len += 1 + 4 * l.shape.len() as u64;
        len += (l.bits.len() as u64).div_ceil(8);
        len += 4 + 4 * l.values.len() as u64;
    }
    len
}
