use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use transip_tensor::{Array, Tape, Tensor};

use crate::{Error, Result};

/// Named parameter arrays in creation order.
///
/// Values are shared immutably; an optimizer step swaps in new arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Arc<Array>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, value: Array) -> usize {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Arc<Array>] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i].as_ref())
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Replaces value `i`; the shape must not change.
    pub fn set(&mut self, i: usize, value: Array) -> Result<()> {
        if value.shape() != self.values[i].shape() {
            return Err(Error::Incompatible(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[i],
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    /// Replaces every value from `(name, array)` pairs, which must match the
    /// existing names and shapes in order.
    pub fn load(&mut self, entries: Vec<(String, Array)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Incompatible(format!("expected {} parameters, found {}", self.len(), entries.len())));
        }
        for (i, (name, value)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Incompatible(format!("expected parameter {}, found {name}", self.names[i])));
            }
            self.set(i, value)?;
        }
        Ok(())
    }

    /// Leaves on `tape` when given (for gradients), constants otherwise.
    pub fn bind(&self, tape: Option<&Tape>) -> Result<Vec<Tensor>> {
        self.values
            .iter()
            .map(|v| match tape {
                Some(t) => Ok(t.var_shared(v.clone())?),
                None => Ok(Tensor::constant_shared(v.clone())),
            })
            .collect()
    }
}

/// Normal samples with `std`, redrawn outside two standard deviations.
pub(crate) fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = rng.sample(StandardNormal);
            if x.abs() <= 2.0 {
                break x * std;
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("shape matches data")
}

pub(crate) fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Array::new(shape.to_vec(), data).expect("shape matches data")
}
