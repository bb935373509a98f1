//! Named parameter collections and element-wise algebra over them.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered list of named tensors. Order is part of the identity: two sets
/// are compatible when names and shapes agree position by position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.push(Param {
            name: name.into(),
            value,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Total number of scalar entries.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    fn check_layout(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        if self.same_layout(other) {
            return Ok(());
        }
        let first_bad = self
            .params
            .iter()
            .zip(&other.params)
            .find(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape());
        match first_bad {
            Some((a, b)) => Err(Error::shape(op, a.value.shape(), b.value.shape())),
            None => Err(Error::invalid(
                op,
                alloc::format!("{} vs {} parameters", self.len(), other.len()),
            )),
        }
    }

    /// Same layout, every entry set to `value`.
    pub fn filled(&self, value: f64) -> ParamSet {
        self.map(|_| value)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| {
                    let mut value = p.value.clone();
                    value.data_mut().iter_mut().for_each(|v| *v = f(*v));
                    Param {
                        name: p.name.clone(),
                        value,
                    }
                })
                .collect(),
        }
    }

    /// Element-wise combination of two sets with identical layout.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.check_layout(other, "zip_map")?;
        let mut out = self.clone();
        for (p, q) in out.params.iter_mut().zip(&other.params) {
            for (a, b) in p.value.data_mut().iter_mut().zip(q.value.data()) {
                *a = f(*a, *b);
            }
        }
        Ok(out)
    }

    /// Element-wise combination of three sets with identical layout.
    pub fn zip3_map(
        &self,
        b: &ParamSet,
        c: &ParamSet,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<ParamSet> {
        self.check_layout(b, "zip3_map")?;
        self.check_layout(c, "zip3_map")?;
        let mut out = self.clone();
        for ((p, q), r) in out.params.iter_mut().zip(&b.params).zip(&c.params) {
            for ((x, y), z) in p.value.data_mut().iter_mut().zip(q.value.data()).zip(r.value.data()) {
                *x = f(*x, *y, *z);
            }
        }
        Ok(out)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.params.iter().flat_map(|p| p.value.data().iter().copied())
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        if !self.same_layout(other) {
            return f64::INFINITY;
        }
        self.values()
            .zip(other.values())
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }
}

impl FromIterator<Param> for ParamSet {
    fn from_iter<I: IntoIterator<Item = Param>>(iter: I) -> Self {
        Self {
            params: iter.into_iter().collect(),
        }
    }
}
