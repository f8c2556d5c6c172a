use crate::{AutogradError, Real, Result, Tensor};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Arc<Tensor<T>>,
}

/// Named learnable tensors. Values are reference counted so tapes can read
/// them without copying; mutation goes through copy-on-write.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), e.value.as_ref()))
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let current = self.get(id).shape();
        if current != value.shape() {
            return Err(AutogradError::ShapeMismatch {
                op: "ParamStore::set",
                left: current,
                right: value.shape(),
            });
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.shape().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: Arc::new(e.value.cast()),
                })
                .collect(),
        }
    }

    /// Bitwise equality of every parameter.
    pub fn bit_equal(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> GradStore<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Self {
            grads: params
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn add(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        self.grads[id.0].add_assign(grad)
    }

    pub fn merge(&mut self, other: &GradStore<T>) -> Result<()> {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    /// Largest elementwise relative difference to `other`, with denominators
    /// floored at `floor`.
    pub fn max_relative_diff(&self, other: &GradStore<T>, floor: f64) -> f64 {
        self.grads
            .iter()
            .zip(&other.grads)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(x, y)| crate::relative_error(x.as_f64(), y.as_f64(), floor))
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self, id: ParamId) -> bool {
        self.grads[id.0].data().iter().all(|x| *x == T::zero())
    }
}
