//! Named parameter and buffer storage shared by models and the tape.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Gradients, Graph};
use crate::tensor::{Real, Tensor};

static NEXT_STORE: AtomicUsize = AtomicUsize::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable; gets a gradient buffer.
    Weight,
    /// Carried state such as batch-norm running statistics.
    Buffer,
}

/// Ordered collection of named tensors. Insertion order is the checkpoint order.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: usize,
    frozen: bool,
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            frozen: self.frozen,
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            frozen: false,
            names: Vec::new(),
            kinds: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> usize {
        self.uid
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> ParamId {
        assert!(
            self.id(name).is_none(),
            "duplicate parameter name '{}'",
            name
        );
        self.names.push(name.into());
        self.kinds.push(kind);
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_weight(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, ParamKind::Weight)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, ParamKind::Buffer)
    }

    /// Weight drawn uniformly from `±sqrt(1/fan_in)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / num_traits::Float::sqrt(fan_in.max(1) as f64);
        let t = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        self.add_weight(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    /// Value for update together with its accumulated gradient.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor<T>, &Tensor<T>) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    /// Replace a tensor by name; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("no parameter named '{}'", name)))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(shape_err(
                "param set",
                format!(
                    "'{}' has shape {:?}, got {:?}",
                    name,
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Frozen stores bind as constants: no gradient ever reaches them.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.frozen && self.kinds[id.0] == ParamKind::Weight
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Add the tape gradients of every parameter of this store that was bound
    /// into `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (uid, id, var) in graph.bound_params() {
            if uid != self.uid {
                continue;
            }
            if let Some(g) = grads.get(var) {
                for (acc, &v) in self.grads[id.0].data_mut().iter_mut().zip(g.data()) {
                    *acc = *acc + v;
                }
            }
        }
    }

    /// Σ|grad| over all entries.
    pub fn grad_abs_sum(&self) -> T {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .fold(T::zero(), |a, v| a + v.abs())
    }

    pub fn num_weights(&self) -> usize {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Weight)
            .map(|id| self.value(id).len())
            .sum()
    }

    /// Apply running-statistic updates recorded by train-mode batch norms.
    pub fn apply_stat_updates(&mut self, graph: &mut Graph<T>) {
        let updates = graph.take_stat_updates(self.uid);
        for u in updates {
            let m = T::of(BatchNormParams::MOMENTUM);
            let keep = T::one() - m;
            for (dst, &b) in self.values[u.params.mean.0]
                .data_mut()
                .iter_mut()
                .zip(&u.batch_mean)
            {
                *dst = keep * *dst + m * b;
            }
            for (dst, &b) in self.values[u.params.var.0]
                .data_mut()
                .iter_mut()
                .zip(&u.batch_var)
            {
                *dst = keep * *dst + m * b;
            }
            let tracked = &mut self.values[u.params.tracked.0].data_mut()[0];
            *tracked = *tracked + T::one();
        }
    }

    /// Mark every batch norm as initialized with its current (identity) statistics.
    pub fn initialize_running_stats(&mut self) {
        for i in 0..self.names.len() {
            if self.kinds[i] == ParamKind::Buffer && self.names[i].ends_with(".tracked") {
                let v = &mut self.values[i].data_mut()[0];
                if *v == T::zero() {
                    *v = T::one();
                }
            }
        }
    }
}

/// Ids of one batch-norm layer inside a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub tracked: ParamId,
}

impl BatchNormParams {
    pub const MOMENTUM: f64 = 0.1;

    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_weight(&format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add_weight(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            var: store.add_buffer(
                &format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
            tracked: store.add_buffer(&format!("{name}.tracked"), Tensor::zeros(&[1])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clone_gets_fresh_identity() {
        let mut s = ParamStore::<f32>::new();
        s.add_weight("w", Tensor::zeros(&[2]));
        let c = s.clone();
        assert_ne!(s.uid(), c.uid());
        assert_eq!(c.id("w"), Some(ParamId(0)));
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = ParamStore::<f32>::new();
        s.add_weight("w", Tensor::zeros(&[2]));
        assert!(s.set("w", Tensor::zeros(&[3])).is_err());
        assert!(s.set("missing", Tensor::zeros(&[2])).is_err());
        assert!(s.set("w", Tensor::full(&[2], 1.0)).is_ok());
    }
}
