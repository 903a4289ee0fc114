use std::collections::BTreeMap;

use crate::tensor::Tensor;
use crate::{NnError, Result};

/// One named trainable tensor tagged with the group it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub tensor: Tensor,
}

/// Ordered collection of named parameters. Order is insertion order and is
/// the order gradients, optimizer moments and archives use.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::Invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group: group.into(), tensor });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i].tensor)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.params[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn param(&self, i: usize) -> &Param {
        &self.params[i]
    }

    /// Indices of every parameter in `group`.
    pub fn group_indices(&self, group: &str) -> Vec<usize> {
        self.params.iter().enumerate().filter(|(_, p)| p.group == group).map(|(i, _)| i).collect()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.params.iter().map(|p| p.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Overwrites every tensor of `group` with the one of the same name in `other`.
    pub fn copy_group_from(&mut self, group: &str, other: &ParamSet) -> Result<()> {
        for i in self.group_indices(group) {
            let name = &self.params[i].name;
            let src = other
                .index_of(name)
                .map(|j| other.param(j))
                .ok_or_else(|| NnError::Invalid(format!("{name} missing from source set")))?;
            if src.group != group || src.tensor.shape() != self.params[i].tensor.shape() {
                return Err(NnError::Invalid(format!("{name} does not align with source set")));
            }
            self.params[i].tensor = src.tensor.clone();
        }
        Ok(())
    }

    /// True when both sets hold the same names, groups and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.tensor.shape() == b.tensor.shape())
    }

    /// True when every tensor of `group` is bitwise equal in both sets.
    pub fn group_bit_eq(&self, other: &ParamSet, group: &str) -> bool {
        self.group_indices(group)
            .iter()
            .all(|&i| other.get(&self.params[i].name).is_some_and(|t| t.bit_eq(&self.params[i].tensor)))
    }
}
