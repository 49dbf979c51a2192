use std::collections::HashMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Trainable,
    /// Never differentiated and never updated.
    Frozen,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: Role,
}

/// Flat, ordered parameter registry shared by every model component.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: Role) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, role });
        id
    }

    pub fn trainable(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name, value, Role::Trainable)
    }

    pub fn frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name, value, Role::Frozen)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn count(&self, role: Role) -> usize {
        self.params.iter().filter(|p| p.role == role).map(|p| p.value.len()).sum()
    }

    /// Places every parameter on `g`. Those accepted by `differentiate` become
    /// gradient leaves; the rest are constants.
    pub fn bind(&self, g: &mut Graph, differentiate: impl Fn(&Param) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.role == Role::Trainable && differentiate(p) {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Order-sensitive FNV-1a digest over names, shapes, and value bits of the
    /// parameters with the given role.
    pub fn checksum(&self, role: Role) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for p in self.params.iter().filter(|p| p.role == role) {
            eat(p.name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn to_named(&self) -> NamedTensors {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites values from a checkpoint. Every stored parameter must be
    /// present with a matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: stored {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = (*t).clone();
        }
        Ok(())
    }
}

/// Graph handles for one [`ParamStore::bind`] call.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps handles already placed on a graph, one per stored parameter.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient per parameter (zero where not differentiated).
    pub fn collect(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

impl std::ops::Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
