use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter; only weights receive the L2 penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone)]
struct Entry<F> {
    name: String,
    kind: ParamKind,
    tensor: Tensor<F>,
}

/// Named, ordered parameter collection owned by one model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, kind, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Weight)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Adds `scale * grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &super::Gradients<F>, scale: F) {
        for (id, g) in grads.params() {
            let t = &mut self.entries[id.0].tensor;
            let slot = t.grad.get_or_insert_with(|| vec![F::zero(); g.len()]);
            for (s, &v) in slot.iter_mut().zip(g) {
                *s += v * scale;
            }
        }
    }

    /// Adds `scale * grad` into one parameter's gradient slot.
    pub fn add_grad(&mut self, id: ParamId, grad: &[F], scale: F) {
        let t = &mut self.entries[id.0].tensor;
        let slot = t.grad.get_or_insert_with(|| vec![F::zero(); grad.len()]);
        for (s, &v) in slot.iter_mut().zip(grad) {
            *s += v * scale;
        }
    }

    /// Copies values of every parameter whose name starts with `prefix`
    /// from `other`; shapes must agree.
    pub fn copy_matching(&mut self, other: &ParamStore<F>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            let Some(src) = other.find(&e.name) else {
                return Err(Error::Load(format!("missing parameter {}", e.name)));
            };
            let src = other.get(src);
            if src.shape() != e.tensor.shape() {
                return Err(Error::Load(format!(
                    "parameter {} has shape {:?}, checkpoint holds {:?}",
                    e.name,
                    e.tensor.shape(),
                    src.shape()
                )));
            }
            e.tensor.data_mut().copy_from_slice(src.data());
            copied += 1;
        }
        Ok(copied)
    }

    /// Copy of the parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            let mut t = e.tensor.clone();
            t.grad = None;
            out.add(e.name.clone(), e.kind, t);
        }
        out
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for e in &self.entries {
            if !e.tensor.is_finite() {
                return Err(Error::Numeric(format!("parameter {} is not finite", e.name)));
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }
}
