//! Trainable parameters and the store that owns them.

use serde::{Deserialize, Serialize};

use crate::error::{QrnError, Result};
use crate::tensor::{Scalar, Tensor};

/// Role of a parameter, used for weight-decay selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
}

impl ParamKind {
    /// Whether weight decay applies. Biases are decayed only on request.
    pub fn is_decayed(self, decay_biases: bool) -> bool {
        match self {
            ParamKind::Weight | ParamKind::Embedding => true,
            ParamKind::Bias => decay_biases,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<F>,
    pub gradient: Tensor<F>,
    /// AdaGrad sum of squared gradients.
    pub accumulator: Tensor<F>,
    /// Columns held fixed at their initial value (the PAD/NIL embedding columns).
    pub pinned_cols: Vec<usize>,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor<F>) -> Self {
        let gradient = Tensor::zeros(value.shape());
        let accumulator = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            kind,
            value,
            gradient,
            accumulator,
            pinned_cols: Vec::new(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.gradient.data_mut().iter_mut().for_each(|g| *g = F::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Whether flat entry `i` lies in a pinned column.
    pub fn is_pinned(&self, i: usize) -> bool {
        !self.pinned_cols.is_empty() && self.pinned_cols.contains(&(i % self.value.cols()))
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameters. Order is stable and defines
/// the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, param: Parameter<F>) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == param.name) {
            return Err(QrnError::Contract(format!(
                "duplicate parameter name `{}`",
                param.name
            )));
        }
        self.params.push(param);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Adds `scale * grad` into the stored gradient of `id`.
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<F>, scale: F) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.gradient.shape() != grad.shape() {
            return Err(QrnError::dim("accumulate", p.gradient.shape(), grad.shape()));
        }
        for (g, &v) in p.gradient.data_mut().iter_mut().zip(grad.data()) {
            *g = *g + scale * v;
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                    gradient: p.gradient.cast(),
                    accumulator: p.accumulator.cast(),
                    pinned_cols: p.pinned_cols.clone(),
                })
                .collect(),
        }
    }
}
