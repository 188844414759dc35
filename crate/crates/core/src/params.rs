//! Named parameter storage shared by all trainable models.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Handle to one parameter matrix inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat store of named parameter matrices. Models keep `ParamId` handles and
/// the store owns the values, so optimizers and checkpoints can walk every
/// parameter without knowing the model structure.
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<F>)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replace a parameter value, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Array2<F>) -> Result<()> {
        if self.values[id.0].dim() != value.dim() {
            return Err(CoreError::Shape {
                context: "ParamStore::assign",
                detail: format!(
                    "{}: stored {:?}, new {:?}",
                    self.names[id.0],
                    self.values[id.0].dim(),
                    value.dim()
                ),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
pub struct Grads<F: Scalar> {
    pub slots: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Array2<F>) {
        match &mut self.slots[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<F>> {
        self.slots[id.0].as_ref()
    }

    /// Global L2 norm over all populated slots.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for slot in self.slots.iter().flatten() {
            for v in slot.iter() {
                let x = v.to_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for slot in self.slots.iter_mut().flatten() {
            slot.mapv_inplace(|v| v * factor);
        }
    }
}

/// Uniform init in `[-limit, limit]` with the Glorot fan-based limit.
pub fn glorot_uniform<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        F::from_f64(rng.random_range(-limit..limit))
    })
}

/// Uniform init in `[-scale, scale]`.
pub fn uniform_init<F: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| {
        F::from_f64(rng.random_range(-scale..scale))
    })
}

pub fn zeros_init<F: Scalar>(rows: usize, cols: usize) -> Array2<F> {
    Array2::zeros((rows, cols))
}

/// Constant-filled matrix, used for bias rows that start at a chosen offset.
pub fn const_init<F: Scalar>(rows: usize, cols: usize, value: f64) -> Array2<F> {
    Array2::from_elem((rows, cols), F::from_f64(value))
}
