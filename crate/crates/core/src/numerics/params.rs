use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Ordered map from parameter name to tensor. Insertion order is the model's
/// definition order and is preserved exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

/// Gradients aligned with a `ParamSet`.
pub type GradSet = ParamSet;

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar values across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names, same order, same shapes.
    pub fn aligned_with(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape == bt.shape)
    }

    pub fn check_aligned(&self, other: &ParamSet, ctx: &str) -> Result<()> {
        if self.aligned_with(other) {
            Ok(())
        } else {
            Err(Error::Structure(format!("{ctx}: parameter sets differ")))
        }
    }

    /// Zero-filled set with the same structure.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
        }
    }

    /// Flatten every tensor's data into one vector, in definition order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Overwrite all values from a flat vector in definition order.
    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::Structure(format!(
                "flat length {} != parameter count {}",
                values.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let len = t.data.len();
            t.data.copy_from_slice(&values[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Copy values from an aligned set.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_aligned(other, "copy_from")?;
        for ((_, dst), (_, src)) in self.entries.iter_mut().zip(other.entries.iter()) {
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}
