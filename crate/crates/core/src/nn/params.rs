use std::collections::BTreeMap;

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Param {
    path: String,
    value: Matrix,
    grad: Matrix,
    touched: bool,
    nonneg: bool,
}

/// Named parameters with gradient accumulators of identical shape.
///
/// A parameter is "touched" once any gradient has been accumulated into it
/// since the last [`ParamStore::zero_grads`]; the optimizer only updates
/// touched parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: impl Into<String>, value: Matrix) -> Result<ParamId> {
        self.insert(path.into(), value, false)
    }

    /// Adds a parameter that the optimizer projects onto `value ≥ 0` after each update.
    pub fn add_nonneg(&mut self, path: impl Into<String>, value: Matrix) -> Result<ParamId> {
        if value.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::contract("nonnegative parameter initialized with negative entries"));
        }
        self.insert(path.into(), value, true)
    }

    fn insert(&mut self, path: String, value: Matrix, nonneg: bool) -> Result<ParamId> {
        if self.index.contains_key(&path) {
            return Err(Error::contract(format!("duplicate parameter path `{path}`")));
        }
        if !value.all_finite() {
            return Err(Error::contract(format!("parameter `{path}` has non-finite entries")));
        }
        let id = self.params.len();
        self.index.insert(path.clone(), id);
        let (r, c) = value.shape();
        self.params.push(Param {
            path,
            value,
            grad: Matrix::zeros(r, c),
            touched: false,
            nonneg,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn path(&self, id: ParamId) -> &str {
        &self.params[id.0].path
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    /// Mutable gradient accumulator; marks the parameter as touched.
    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        let p = &mut self.params[id.0];
        p.touched = true;
        &mut p.grad
    }

    /// Value and gradient accumulator together; marks the parameter as touched.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&Matrix, &mut Matrix) {
        let p = &mut self.params[id.0];
        p.touched = true;
        (&p.value, &mut p.grad)
    }

    pub fn is_touched(&self, id: ParamId) -> bool {
        self.params[id.0].touched
    }

    pub fn is_nonneg(&self, id: ParamId) -> bool {
        self.params[id.0].nonneg
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
            p.touched = false;
        }
    }

    /// `(path, value)` pairs in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|p| (p.path.as_str(), &p.value))
    }

    /// Overwrites values by path. Every stored path must be present with a matching shape.
    pub fn assign(&mut self, values: &[(String, Matrix)]) -> Result<()> {
        let lookup: BTreeMap<&str, &Matrix> = values.iter().map(|(k, v)| (k.as_str(), v)).collect();
        if lookup.len() != self.params.len() {
            return Err(Error::Data(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                lookup.len()
            )));
        }
        for p in &mut self.params {
            let src = lookup
                .get(p.path.as_str())
                .ok_or_else(|| Error::Data(format!("missing parameter `{}`", p.path)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Data(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.path,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = (*src).clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = ParamStore::new();
        s.add("a/w", Matrix::zeros(2, 2)).unwrap();
        assert!(s.add("a/w", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn grad_shape_follows_value() {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::zeros(3, 5)).unwrap();
        assert_eq!(s.grad(id).shape(), (3, 5));
        assert!(!s.is_touched(id));
        s.grad_mut(id).set(0, 0, 1.0);
        assert!(s.is_touched(id));
        s.zero_grads();
        assert!(!s.is_touched(id));
        assert_eq!(s.grad(id).get(0, 0), 0.0);
    }

    #[test]
    fn assign_checks_shapes() {
        let mut s = ParamStore::new();
        s.add("w", Matrix::zeros(2, 2)).unwrap();
        assert!(s.assign(&[("w".into(), Matrix::zeros(2, 3))]).is_err());
        assert!(s.assign(&[("v".into(), Matrix::zeros(2, 2))]).is_err());
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        s.assign(&[("w".into(), m.clone())]).unwrap();
        assert_eq!(s.value(s.id("w").unwrap()), &m);
    }
}
