use serde::{Deserialize, Serialize};

use crate::error::{AtmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Fully connected classifier layout: input width, hidden widths, class count.
///
/// Parameters are stored layer by layer. Layer `l` maps width `w[l]` to
/// `w[l+1]` and occupies `w[l]*w[l+1]` row-major weights (row = output unit)
/// followed by `w[l+1]` biases. The activation applies to every hidden layer;
/// the last layer emits raw logits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

/// Location of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Offset of the first weight.
    pub offset: usize,
}

impl LayerSlot {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }

    /// Weights plus biases.
    pub fn len(&self) -> usize {
        self.weight_len() + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl ArchSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = ArchSpec {
            layer_widths,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(AtmError::config(format!(
                "architecture needs at least 2 layer widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(AtmError::config(format!(
                "layer widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_widths.last().expect("validated arch is non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layers(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += slot.len();
                slot
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_formula() {
        let arch = ArchSpec::new(vec![2, 3, 2], Activation::Relu).unwrap();
        assert_eq!(arch.param_count(), 2 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(arch.param_count(), 17);
        let layers = arch.layers();
        assert_eq!(layers[1].offset, 9);
        assert_eq!(layers[1].range().end, 17);
    }

    #[test]
    fn rejects_degenerate_widths() {
        assert!(ArchSpec::new(vec![4], Activation::Tanh).is_err());
        assert!(ArchSpec::new(vec![4, 0, 2], Activation::Tanh).is_err());
        assert!(ArchSpec::new(vec![1, 1], Activation::Tanh).is_ok());
    }
}
