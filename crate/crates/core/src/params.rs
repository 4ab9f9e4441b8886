//! Named-layer flat parameter storage, binary masks, and the elementwise
//! algebra shared by training, pruning, and aggregation.
//!
//! Values are stored and exchanged as `f32`; sums accumulate in `f64`.

use crate::error::{Error, Result};

/// One named tensor stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    /// Whether pruning may clear coordinates of this layer. Weight matrices
    /// are prunable; bias vectors are not.
    pub prunable: bool,
}

impl ParamLayer {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered list of named layers. Layer order is fixed for the lifetime of an
/// experiment; every model exchanged within one experiment is structurally
/// identical (same names, shapes, order, prunable flags).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub layers: Vec<ParamLayer>,
}

impl ParamVector {
    pub fn total_len(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    /// Same structure, all values zero.
    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            layers: self
                .layers
                .iter()
                .map(|l| ParamLayer {
                    name: l.name.clone(),
                    shape: l.shape.clone(),
                    values: vec![0.0; l.values.len()],
                    prunable: l.prunable,
                })
                .collect(),
        }
    }

    /// Errors unless `other` has identical names, shapes, order and
    /// prunable flags.
    pub fn check_structure(&self, other: &ParamVector) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::StructuralMismatch(format!(
                "layer count {} vs {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.name != b.name {
                return Err(Error::StructuralMismatch(format!(
                    "layer name {:?} vs {:?}",
                    a.name, b.name
                )));
            }
            if a.shape != b.shape || a.values.len() != b.values.len() {
                return Err(Error::StructuralMismatch(format!(
                    "layer {:?}: shape {:?} vs {:?}",
                    a.name, a.shape, b.shape
                )));
            }
            if a.prunable != b.prunable {
                return Err(Error::StructuralMismatch(format!(
                    "layer {:?}: prunable flag differs",
                    a.name
                )));
            }
        }
        Ok(())
    }

    /// Checks the shape-product invariant of every layer.
    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            let expect: usize = l.shape.iter().product();
            if expect != l.values.len() {
                return Err(Error::InvalidParameter(format!(
                    "layer {:?}: {} values but shape {:?}",
                    l.name,
                    l.values.len(),
                    l.shape
                )));
            }
        }
        Ok(())
    }

    /// FNV-1a over the little-endian value bytes, layer by layer. Used for
    /// cheap run-log checksums.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for l in &self.layers {
            for v in &l.values {
                for b in v.to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Binary mask aligned 1:1 with a [`ParamVector`]. Non-prunable layers keep
/// all bits set; a cleared bit never regrows within an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLayer {
    pub name: String,
    pub bits: Vec<bool>,
    pub prunable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub layers: Vec<MaskLayer>,
}

impl PruneMask {
    /// Fresh mask with every bit set.
    pub fn all_ones(p: &ParamVector) -> PruneMask {
        PruneMask {
            layers: p
                .layers
                .iter()
                .map(|l| MaskLayer {
                    name: l.name.clone(),
                    bits: vec![true; l.values.len()],
                    prunable: l.prunable,
                })
                .collect(),
        }
    }

    pub fn check_structure_params(&self, p: &ParamVector) -> Result<()> {
        if self.layers.len() != p.layers.len() {
            return Err(Error::StructuralMismatch(format!(
                "mask has {} layers, params {}",
                self.layers.len(),
                p.layers.len()
            )));
        }
        for (m, l) in self.layers.iter().zip(&p.layers) {
            if m.name != l.name || m.bits.len() != l.values.len() || m.prunable != l.prunable {
                return Err(Error::StructuralMismatch(format!(
                    "mask layer {:?} does not match param layer {:?}",
                    m.name, l.name
                )));
            }
        }
        Ok(())
    }

    pub fn check_structure(&self, other: &PruneMask) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::StructuralMismatch(format!(
                "mask layer count {} vs {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.name != b.name || a.bits.len() != b.bits.len() || a.prunable != b.prunable {
                return Err(Error::StructuralMismatch(format!(
                    "mask layer {:?} vs {:?}",
                    a.name, b.name
                )));
            }
        }
        Ok(())
    }

    /// Number of coordinates in prunable layers.
    pub fn prunable_total(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.prunable)
            .map(|l| l.bits.len())
            .sum()
    }

    /// Number of cleared bits among prunable layers.
    pub fn cleared_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.prunable)
            .map(|l| l.bits.iter().filter(|b| !**b).count())
            .sum()
    }
}

/// Zeroes every coordinate whose mask bit is cleared. Structure preserved.
pub fn apply_mask(p: &ParamVector, m: &PruneMask) -> Result<ParamVector> {
    m.check_structure_params(p)?;
    let mut out = p.clone();
    for (layer, mask) in out.layers.iter_mut().zip(&m.layers) {
        for (v, &bit) in layer.values.iter_mut().zip(&mask.bits) {
            if !bit {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Cleared prunable bits over total prunable coordinates, in `[0, 1]`.
pub fn pruning_ratio(m: &PruneMask) -> Result<f64> {
    let total = m.prunable_total();
    if total == 0 {
        return Err(Error::DegenerateModel);
    }
    Ok(m.cleared_count() as f64 / total as f64)
}

/// Coordinatewise weighted sum of structurally identical vectors,
/// accumulated in `f64`.
pub fn linear_combine(terms: &[(f64, &ParamVector)]) -> Result<ParamVector> {
    let (_, first) = terms.first().ok_or(Error::EmptyInput("linear_combine"))?;
    for (_, p) in &terms[1..] {
        first.check_structure(p)?;
    }
    let mut out = first.zeros_like();
    for (li, layer) in out.layers.iter_mut().enumerate() {
        for ci in 0..layer.values.len() {
            let mut acc = 0.0f64;
            for (w, p) in terms {
                acc += w * f64::from(p.layers[li].values[ci]);
            }
            layer.values[ci] = acc as f32;
        }
    }
    Ok(out)
}
