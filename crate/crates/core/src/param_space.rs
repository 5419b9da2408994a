//! Grouped flat parameter vectors.
//!
//! Every quantity the simulation moves around (model parameters, gradients,
//! local updates, error accumulators) is a [`ParamVector`]: a dense `f64`
//! buffer partitioned into contiguous groups by a shared [`GroupLayout`].
//! Groups play the role of network layers for the grouped compressors.
//!
//! All reductions run in ascending index order so results are
//! bit-reproducible across runs.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of `[0, d)` into `M >= 1` contiguous, non-empty groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct GroupLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl GroupLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidLayout("at least one group is required".into()));
        }
        if let Some(pos) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidLayout(format!("group {pos} is empty")));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0usize;
        offsets.push(0);
        for &s in &sizes {
            acc += s;
            offsets.push(acc);
        }
        Ok(Self { sizes, offsets })
    }

    /// Single group covering all `d` coordinates.
    pub fn single(d: usize) -> Result<Self> {
        Self::new(vec![d])
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().expect("offsets are never empty")
    }

    pub fn num_groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn group_range(&self, g: usize) -> Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn group_ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }

    /// Group containing coordinate `index`, or `None` when out of bounds.
    pub fn group_of(&self, index: usize) -> Option<usize> {
        if index >= self.dim() {
            return None;
        }
        // offsets is sorted; the group is the last offset <= index
        Some(self.offsets.partition_point(|&o| o <= index) - 1)
    }
}

impl TryFrom<Vec<usize>> for GroupLayout {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        Self::new(sizes)
    }
}

impl From<GroupLayout> for Vec<usize> {
    fn from(layout: GroupLayout) -> Self {
        layout.sizes
    }
}

/// Dense vector of model coordinates tied to a [`GroupLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<GroupLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    /// Builds a vector after checking length and finiteness.
    pub fn new(layout: Arc<GroupLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::InvalidLayout(format!(
                "expected {} values, got {}",
                layout.dim(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(Self { layout, values })
    }

    /// Convenience constructor with a single-group layout.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(Arc::new(GroupLayout::single(values.len())?), values.to_vec())
    }

    pub fn zeros(layout: Arc<GroupLayout>) -> Self {
        let d = layout.dim();
        Self {
            layout,
            values: vec![0.0; d],
        }
    }

    /// Skips the finiteness check. Used on hot paths where the caller
    /// guards divergence separately.
    pub(crate) fn from_raw(layout: Arc<GroupLayout>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), layout.dim());
        Self { layout, values }
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn shared_layout(&self) -> &Arc<GroupLayout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn group(&self, g: usize) -> &[f64] {
        &self.values[self.layout.group_range(g)]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_same_layout(&self, other: &ParamVector) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch {
                expected: self.layout.group_sizes().to_vec(),
                got: other.layout.group_sizes().to_vec(),
            })
        }
    }

    /// `y + a * x`, evaluated coordinate-wise.
    pub fn add_scaled(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
        y.check_same_layout(x)?;
        let values = y.values.iter().zip(&x.values).map(|(&yi, &xi)| yi + a * xi).collect();
        Ok(Self::from_raw(y.layout.clone(), values))
    }

    /// In-place `self += a * x`. Same arithmetic as [`ParamVector::add_scaled`].
    pub fn axpy(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.check_same_layout(x)?;
        for (yi, &xi) in self.values.iter_mut().zip(&x.values) {
            *yi += a * xi;
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_same_layout(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| a - b).collect();
        Ok(Self::from_raw(self.layout.clone(), values))
    }

    /// `self + other`.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_same_layout(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| a + b).collect();
        Ok(Self::from_raw(self.layout.clone(), values))
    }

    pub fn scale(&self, a: f64) -> ParamVector {
        Self::from_raw(self.layout.clone(), self.values.iter().map(|&v| a * v).collect())
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, &v| acc + v * v)
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |acc, (&a, &b)| acc + a * b))
    }

    /// Per-group l1 norms in layout order.
    pub fn group_l1_norms(&self) -> Vec<f64> {
        self.layout
            .group_ranges()
            .map(|r| self.values[r].iter().fold(0.0, |acc, v| acc + v.abs()))
            .collect()
    }

    pub fn group_sq_norms(&self) -> Vec<f64> {
        self.layout
            .group_ranges()
            .map(|r| self.values[r].iter().fold(0.0, |acc, v| acc + v * v))
            .collect()
    }

    /// Coordinate-wise mean of a non-empty list, summed in list order.
    pub fn mean(vectors: &[&ParamVector]) -> Result<ParamVector> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::InvalidLayout("mean of an empty list".into()))?;
        let mut sum = ParamVector::zeros(first.layout.clone());
        for v in vectors {
            sum.axpy(1.0, v)?;
        }
        let count = vectors.len() as f64;
        for s in &mut sum.values {
            *s /= count;
        }
        Ok(sum)
    }
}

/// Largest per-coordinate gap between `a + b` and `target`, in units of
/// `f64::EPSILON` times the largest operand magnitude. A split
/// `target = a + b` computed as `b = target - a` stays within 2.
pub fn split_residual(a: &ParamVector, b: &ParamVector, target: &ParamVector) -> Result<f64> {
    a.check_same_layout(b)?;
    a.check_same_layout(target)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .zip(&target.values)
        .map(|((&x, &y), &t)| {
            let gap = ((x + y) - t).abs();
            if gap == 0.0 {
                return 0.0;
            }
            let scale = x.abs().max(y.abs()).max(t.abs());
            gap / (f64::EPSILON * scale)
        })
        .fold(0.0, f64::max))
}
