//! Named parameter and running-statistics storage shared by layers and models.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::ParamId;
use crate::tensor::{NormStats, Scalar, Shape4, Tensor4};

/// What a parameter tensor is used for; drives counting conventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    NormScale,
    NormShift,
    Fusion,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor4<T>,
}

/// Ordered registry of trainable tensors. Insertion order is stable and is the
/// order used for flattening, checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor4<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, role, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor4<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalars across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// All parameters concatenated in registry order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    role: e.role,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

/// Running statistics of one normalization layer.
#[derive(Clone, Debug)]
pub struct StatsEntry<T> {
    pub name: String,
    pub stats: NormStats<T>,
}

/// Allocates parameters with their initial values while a model is built.
pub(crate) struct ParamBuilder<'r, T, R> {
    pub params: ParamStore<T>,
    pub stats: Vec<StatsEntry<T>>,
    rng: &'r mut R,
}

impl<'r, T: Scalar, R: Rng> ParamBuilder<'r, T, R> {
    pub fn new(rng: &'r mut R) -> Self {
        ParamBuilder {
            params: ParamStore::new(),
            stats: Vec::new(),
            rng,
        }
    }

    /// Kaiming-normal weights scaled by fan-in, zero bias.
    pub fn conv(&mut self, prefix: &str, out_ch: usize, in_per_group: usize, k: usize) -> (ParamId, ParamId) {
        let fan_in = (in_per_group * k * k).max(1) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let shape = Shape4::new(out_ch, in_per_group, k, k);
        let data = (0..shape.numel())
            .map(|_| T::from_f64(normal.sample(self.rng)))
            .collect();
        let w = self.params.push(
            format!("{prefix}/weight"),
            ParamRole::ConvWeight,
            Tensor4::from_vec(shape, data).expect("weight shape"),
        );
        let b = self.params.push(
            format!("{prefix}/bias"),
            ParamRole::ConvBias,
            Tensor4::vector(&vec![T::zero(); out_ch]),
        );
        (w, b)
    }

    /// Weights laid out `(in_ch, out_ch, 2, 2)` for a transposed convolution.
    pub fn conv_transpose(&mut self, prefix: &str, in_ch: usize, out_ch: usize) -> (ParamId, ParamId) {
        let fan_in = (in_ch * 4) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let shape = Shape4::new(in_ch, out_ch, 2, 2);
        let data = (0..shape.numel())
            .map(|_| T::from_f64(normal.sample(self.rng)))
            .collect();
        let w = self.params.push(
            format!("{prefix}/weight"),
            ParamRole::ConvWeight,
            Tensor4::from_vec(shape, data).expect("weight shape"),
        );
        let b = self.params.push(
            format!("{prefix}/bias"),
            ParamRole::ConvBias,
            Tensor4::vector(&vec![T::zero(); out_ch]),
        );
        (w, b)
    }

    /// Unit scale, zero shift, running mean 0 / variance 1.
    pub fn norm(&mut self, prefix: &str, ch: usize) -> (ParamId, ParamId, usize) {
        let gamma = self.params.push(
            format!("{prefix}/gamma"),
            ParamRole::NormScale,
            Tensor4::vector(&vec![T::one(); ch]),
        );
        let beta = self.params.push(
            format!("{prefix}/beta"),
            ParamRole::NormShift,
            Tensor4::vector(&vec![T::zero(); ch]),
        );
        self.stats.push(StatsEntry {
            name: prefix.to_string(),
            stats: NormStats::new(ch),
        });
        (gamma, beta, self.stats.len() - 1)
    }

    pub fn ones(&mut self, name: &str, ch: usize) -> ParamId {
        self.params
            .push(name, ParamRole::Fusion, Tensor4::vector(&vec![T::one(); ch]))
    }
}
