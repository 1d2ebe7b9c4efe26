use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// What the optimizer may do with a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Trainable,
    /// Updated only while a run explicitly unfreezes everything (warm start).
    Frozen,
    /// Non-gradient state such as running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub role: Role,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

/// Tape handles for every parameter of a store, by name.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, role: Role) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
            role,
        });
        Ok(())
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

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::Config(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.param(name).map(|p| &p.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.param_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "set_value",
                format!("`{name}`: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn count(&self, role: Role) -> usize {
        self.params
            .iter()
            .filter(|p| p.role == role)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a leaf. Trainable parameters require
    /// gradients; frozen ones only when `unfreeze` is set; buffers never.
    pub fn bind(&self, tape: &mut Tape, unfreeze: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let rg = match p.role {
                    Role::Trainable => true,
                    Role::Frozen => unfreeze,
                    Role::Buffer => false,
                };
                (p.name.clone(), tape.leaf(p.value.clone(), rg))
            })
            .collect();
        Bound { vars }
    }

    /// Adds gradients from a backward pass onto each parameter's `grad`.
    pub fn absorb(&mut self, bound: &Bound, grads: &mut Gradients) {
        for p in &mut self.params {
            let Some(g) = bound.vars.get(&p.name).and_then(|&v| grads.take(v)) else {
                continue;
            };
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}
