use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Optimizer group of a parameter; each group can have its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    #[default]
    Default,
    /// The kernel out-scale `v`, trained with a smaller step.
    OutScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    #[serde(default)]
    pub group: ParamGroup,
}

/// Ordered set of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, group: ParamGroup) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("initial value of `{name}`")));
        }
        self.params.push(Param { name, value, group });
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.as_slice().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::DimensionMismatch(format!(
                "flat vector of length {} for {} parameters",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        Bound { names: self.params.iter().map(|p| p.name.clone()).collect(), vars }
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_const(&self, tape: &mut Tape) -> Bound {
        let vars = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        Bound { names: self.params.iter().map(|p| p.name.clone()).collect(), vars }
    }
}

/// Parameters as they appear on a particular tape.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Same names bound to different nodes (e.g. adapted weights).
    pub fn with_vars(&self, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), self.vars.len());
        Self { names: self.names.clone(), vars }
    }
}

/// Gradient of a scalar node with respect to every bound parameter, flattened
/// in [`ParamSet`] order. Unused parameters get zeros.
pub fn gradient(tape: &mut Tape, objective: Var, bound: &Bound) -> Result<Vec<f64>> {
    if !tape.value(objective).is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    let grads = tape.grad(objective, bound.vars())?;
    let mut flat = Vec::new();
    for (name, g) in bound.names().iter().zip(grads) {
        let value = tape.value(g);
        if !value.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        flat.extend_from_slice(value.as_slice());
    }
    Ok(flat)
}
