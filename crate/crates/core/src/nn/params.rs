use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DefError, Result};

/// Location of one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRange {
    pub offset: usize,
    pub len: usize,
}

impl ParamRange {
    pub fn slice<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.offset..self.offset + self.len]
    }

    pub fn slice_mut<'a>(&self, v: &'a mut [f64]) -> &'a mut [f64] {
        &mut v[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter vector with a matching gradient buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    pub tensors: Vec<TensorInfo>,
}

impl ParamStore {
    pub fn alloc(&mut self, name: impl Into<String>, len: usize) -> ParamRange {
        let offset = self.values.len();
        self.values.resize(offset + len, 0.0);
        self.grads.resize(offset + len, 0.0);
        self.tensors.push(TensorInfo { name: name.into(), offset, len });
        ParamRange { offset, len }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Replaces every parameter value, keeping the layout.
    pub fn load_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(shape_err(self.values.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DefError::NonFinite("parameter payload".into()));
        }
        self.values = values;
        Ok(())
    }

    pub(crate) fn split(&mut self) -> (&[f64], &mut [f64]) {
        (&self.values, &mut self.grads)
    }
}
