//! Parameter blocks and their flat layout.
//!
//! Algorithms operate on one flat `Vec<f64>` per variable; a [`Layout`] records
//! where each block lives inside it and whether the block has a matrix view.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of one trainable parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub len: usize,
    /// Row-major `(rows, cols)` view, present for matrix-shaped blocks.
    pub matrix: Option<(usize, usize)>,
}

impl BlockShape {
    pub fn vector(len: usize) -> Self {
        Self { len, matrix: None }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Self {
            len: rows * cols,
            matrix: Some((rows, cols)),
        }
    }
}

/// Ordered block shapes of a model's parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    blocks: Vec<BlockShape>,
}

impl Layout {
    pub fn new(blocks: Vec<BlockShape>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[BlockShape] {
        &self.blocks
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    /// `(offset, shape)` for every block.
    pub fn spans(&self) -> impl Iterator<Item = (usize, BlockShape)> + '_ {
        self.blocks.iter().scan(0usize, |off, b| {
            let start = *off;
            *off += b.len;
            Some((start, *b))
        })
    }

    pub fn check(&self, flat: &[f64]) -> Result<()> {
        let expected = self.total_len();
        if flat.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: flat.len(),
            });
        }
        Ok(())
    }

    /// Splits a flat vector into blocks.
    pub fn split(&self, flat: &[f64]) -> Result<Vec<ParamBlock>> {
        self.check(flat)?;
        Ok(self
            .spans()
            .map(|(off, shape)| ParamBlock {
                values: flat[off..off + shape.len].to_vec(),
                shape: shape.matrix,
            })
            .collect())
    }

    /// Concatenates blocks that match this layout.
    pub fn join(&self, blocks: &[ParamBlock]) -> Result<Vec<f64>> {
        if blocks.len() != self.blocks.len() {
            return Err(Error::invalid(
                "blocks",
                format!("expected {} blocks, got {}", self.blocks.len(), blocks.len()),
            ));
        }
        let mut flat = Vec::with_capacity(self.total_len());
        for (b, shape) in blocks.iter().zip(&self.blocks) {
            if b.values.len() != shape.len || b.shape != shape.matrix {
                return Err(Error::ShapeMismatch {
                    expected: shape.len,
                    got: b.values.len(),
                });
            }
            flat.extend_from_slice(&b.values);
        }
        Ok(flat)
    }
}

/// A trainable parameter group: flat values plus an optional matrix view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub values: Vec<f64>,
    pub shape: Option<(usize, usize)>,
}

impl ParamBlock {
    pub fn new(values: Vec<f64>, shape: Option<(usize, usize)>) -> Result<Self> {
        if let Some((r, c)) = shape {
            if r * c != values.len() {
                return Err(Error::ShapeMismatch {
                    expected: r * c,
                    got: values.len(),
                });
            }
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalOverflow);
        }
        Ok(Self { values, shape })
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            values,
            shape: None,
        }
    }
}
