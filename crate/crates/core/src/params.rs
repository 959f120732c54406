//! Flat parameter vectors and their mapping back to layers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
}

/// One contiguous tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub layer: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous cover of `[0, P)` by parameter blocks.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamLayout {
    blocks: Vec<ParamBlock>,
    total: usize,
}

impl ParamLayout {
    pub fn new(blocks: Vec<ParamBlock>) -> Result<Self> {
        let mut expected = 0;
        for b in &blocks {
            if b.offset != expected {
                return Err(Error::InvalidArgument(format!(
                    "parameter block for layer {} starts at {} but previous block ends at {}",
                    b.layer, b.offset, expected
                )));
            }
            expected += b.len();
        }
        Ok(Self {
            blocks,
            total: expected,
        })
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Weight and bias blocks of `layer`, if it has parameters.
    pub fn layer_blocks(&self, layer: usize) -> Option<(&ParamBlock, &ParamBlock)> {
        let w = self
            .blocks
            .iter()
            .find(|b| b.layer == layer && b.role == ParamRole::Weight)?;
        let b = self
            .blocks
            .iter()
            .find(|b| b.layer == layer && b.role == ParamRole::Bias)?;
        Some((w, b))
    }
}

/// The flat parameter vector `θ` of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::InvalidArgument(format!(
                "parameter vector has {} values, layout expects {}",
                values.len(),
                layout.total()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            values: vec![0.0; layout.total()],
            layout: layout.clone(),
        }
    }

    /// Reassembles a vector from per-block tensors, in layout order.
    pub fn from_blocks(layout: &ParamLayout, blocks: &[Vec<f64>]) -> Result<Self> {
        if blocks.len() != layout.blocks().len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} blocks, got {}",
                layout.blocks().len(),
                blocks.len()
            )));
        }
        let mut values = Vec::with_capacity(layout.total());
        for (spec, data) in layout.blocks().iter().zip(blocks) {
            if spec.len() != data.len() {
                return Err(Error::InvalidArgument(format!(
                    "block for layer {} has {} values, expected {}",
                    spec.layer,
                    data.len(),
                    spec.len()
                )));
            }
            values.extend_from_slice(data);
        }
        Self::new(values, layout.clone())
    }

    /// Splits into per-block tensors.
    pub fn to_blocks(&self) -> Vec<Vec<f64>> {
        self.layout
            .blocks()
            .iter()
            .map(|b| self.values[b.range()].to_vec())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// How a tangent vector was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Gaussian,
    Rademacher,
    Deterministic,
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distribution::Gaussian => "gaussian",
            Distribution::Rademacher => "rademacher",
            Distribution::Deterministic => "deterministic",
        })
    }
}

/// A direction `v` in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub values: Vec<f64>,
    pub distribution: Distribution,
}

impl TangentVector {
    pub fn new(values: Vec<f64>, distribution: Distribution) -> Self {
        Self {
            values,
            distribution,
        }
    }

    pub fn deterministic(values: Vec<f64>) -> Self {
        Self::new(values, Distribution::Deterministic)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Layer, NetworkSpec};

    #[test]
    fn layout_covers_range() {
        let spec = NetworkSpec::mlp(&[3, 5, 2], Layer::Relu).unwrap();
        let layout = spec.layout();
        let mut next = 0;
        for b in layout.blocks() {
            assert_eq!(b.offset, next);
            next += b.len();
        }
        assert_eq!(next, layout.total());
        assert_eq!(layout.total(), 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn rejects_gap() {
        let blocks = vec![
            ParamBlock {
                layer: 0,
                role: ParamRole::Weight,
                shape: vec![2, 2],
                offset: 0,
            },
            ParamBlock {
                layer: 0,
                role: ParamRole::Bias,
                shape: vec![2],
                offset: 5,
            },
        ];
        assert!(ParamLayout::new(blocks).is_err());
    }

    #[test]
    fn blocks_round_trip_bitwise() {
        let spec = NetworkSpec::mlp(&[2, 4, 3], Layer::Tanh).unwrap();
        let values: Vec<f64> = (0..spec.param_count())
            .map(|i| (i as f64).sin() * 1e-3 + f64::EPSILON * i as f64)
            .collect();
        let p = ParamVector::new(values, spec.layout().clone()).unwrap();
        let back = ParamVector::from_blocks(spec.layout(), &p.to_blocks()).unwrap();
        let a: Vec<u64> = p.values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}
