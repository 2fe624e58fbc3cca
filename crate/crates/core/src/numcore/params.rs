//! Flat parameter storage with named block layout.

use std::ops::Range;

use crate::error::{Error, Result};

/// One named block of a [`ParamVector`], stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A block copied out of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub shape: LayerShape,
    pub data: Vec<f64>,
}

/// All learnable parameters of one model as a single flat array.
///
/// The layout maps consecutive ranges of `values` onto named row-major
/// blocks. `values.len()` always equals the sum of the block sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayerShape>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<LayerShape>) -> Result<Self> {
        let expected: usize = layout.iter().map(LayerShape::len).sum();
        if expected != values.len() {
            return Err(Error::DimensionMismatch {
                context: "ParamVector::new",
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<LayerShape>) -> Self {
        let n = layout.iter().map(LayerShape::len).sum();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    /// Same layout, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.layout.clone())
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

    pub fn layout(&self) -> &[LayerShape] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn ensure_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{} values in {} blocks vs {} values in {} blocks",
                self.len(),
                self.layout.len(),
                other.len(),
                other.layout.len()
            )))
        }
    }

    /// Index range of the block called `name`.
    pub fn segment(&self, name: &str) -> Option<Range<usize>> {
        let mut offset = 0;
        for shape in &self.layout {
            if shape.name == name {
                return Some(offset..offset + shape.len());
            }
            offset += shape.len();
        }
        None
    }

    /// Name of the block containing flat index `index`.
    pub fn block_name_at(&self, index: usize) -> Option<&str> {
        let mut offset = 0;
        for shape in &self.layout {
            if index < offset + shape.len() {
                return Some(&shape.name);
            }
            offset += shape.len();
        }
        None
    }

    pub fn unflatten(&self) -> Vec<ParamBlock> {
        let mut offset = 0;
        self.layout
            .iter()
            .map(|shape| {
                let data = self.values[offset..offset + shape.len()].to_vec();
                offset += shape.len();
                ParamBlock {
                    shape: shape.clone(),
                    data,
                }
            })
            .collect()
    }

    pub fn flatten(blocks: &[ParamBlock]) -> Result<Self> {
        let mut values = Vec::with_capacity(blocks.iter().map(|b| b.data.len()).sum());
        let mut layout = Vec::with_capacity(blocks.len());
        for block in blocks {
            if block.data.len() != block.shape.len() {
                return Err(Error::DimensionMismatch {
                    context: "ParamVector::flatten",
                    expected: block.shape.len(),
                    actual: block.data.len(),
                });
            }
            values.extend_from_slice(&block.data);
            layout.push(block.shape.clone());
        }
        Ok(Self { values, layout })
    }

    /// Appends the blocks of `other` after the blocks of `self`.
    pub fn concat(&self, other: &ParamVector) -> ParamVector {
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        let mut layout = self.layout.clone();
        layout.extend(other.layout.iter().cloned());
        ParamVector { values, layout }
    }

    /// First non-finite entry, reported with the block it lives in.
    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(Error::NonFinite {
                context,
                layer: self.block_name_at(index).unwrap_or("?").to_string(),
                index,
            }),
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        axpy(alpha, &other.values, &mut self.values);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
