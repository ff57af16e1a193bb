use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Named collection of tensors with a deterministic (sorted) key order.
///
/// Used both for parameter sets and for gradients over them; the two
/// aliases below only document intent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorMap(BTreeMap<String, Tensor>);

pub type WeightSet = TensorMap;
pub type GradientMap = TensorMap;

impl TensorMap {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| AutodiffError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.0.values()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, t)| (k.clone(), t.zeros_like()))
                .collect(),
        )
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, t)| (k.clone(), t.scale(s)))
                .collect(),
        )
    }

    fn check_keys(&self, other: &Self) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "tensor_map",
                msg: format!(
                    "key sets differ ({} vs {} entries)",
                    self.0.len(),
                    other.0.len()
                ),
            });
        }
        for k in self.0.keys() {
            if !other.0.contains_key(k) {
                return Err(AutodiffError::Missing(k.clone()));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`, requiring identical key sets and shapes.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_keys(other)?;
        for (k, t) in self.0.iter_mut() {
            t.axpy(alpha, &other.0[k])?;
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_keys(other)?;
        let mut acc = 0.0;
        for (k, t) in &self.0 {
            acc += t.dot(&other.0[k])?;
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        self.0.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }

    /// Entries whose key starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self(
            self.0
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        )
    }

    /// Copy of the map with `prefix` prepended to every key.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, t)| (format!("{prefix}{k}"), t.clone()))
                .collect(),
        )
    }

    /// Moves all entries of `other` into `self`.
    pub fn extend(&mut self, other: Self) {
        self.0.extend(other.0);
    }

    /// Concatenation of all entries in key order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.0.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten): overwrite entries from a flat slice.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "assign_flat",
                expected: vec![self.numel()],
                got: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for t in self.0.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Global 2-norm clipping; returns the pre-clip norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            let s = max_norm / n;
            for t in self.0.values_mut() {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
        n
    }

    /// Bitwise equality of every entry (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().all(|(k, t)| {
                other.0.get(k).is_some_and(|o| {
                    o.shape() == t.shape()
                        && o.data()
                            .iter()
                            .zip(t.data())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }
}

impl FromIterator<(String, Tensor)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl IntoIterator for TensorMap {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}
