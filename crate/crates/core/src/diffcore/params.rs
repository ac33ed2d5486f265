use std::collections::BTreeMap;

use super::matrix::Matrix;
use crate::error::{Result, SsftError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamLeaf {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named learnable parameters, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    leaves: Vec<ParamLeaf>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = Matrix::zeros(value.rows(), value.cols());
        let id = self.leaves.len();
        self.by_name.insert(name.clone(), id);
        self.leaves.push(ParamLeaf { name, value, grad });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn expect_id(&self, name: &str) -> ParamId {
        self.id(name)
            .unwrap_or_else(|| panic!("parameter {name} is not registered"))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.leaves.len()).map(ParamId)
    }

    pub fn leaf(&self, id: ParamId) -> &ParamLeaf {
        &self.leaves[id.0]
    }

    pub fn leaf_mut(&mut self, id: ParamId) -> &mut ParamLeaf {
        &mut self.leaves[id.0]
    }

    pub fn leaves(&self) -> &[ParamLeaf] {
        &self.leaves
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.leaves[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.leaves[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.leaves[id.0].grad
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn zero_grads(&mut self) {
        for leaf in &mut self.leaves {
            leaf.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Matrix) {
        self.leaves[id.0].grad.add_assign(g);
    }

    /// Overwrites a value, checking the shape against the registered one.
    pub fn assign(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| SsftError::Schema(format!("unknown parameter {name}")))?;
        let leaf = &mut self.leaves[id.0];
        if leaf.value.shape() != value.shape() {
            return Err(SsftError::Schema(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                leaf.value.shape(),
                value.shape()
            )));
        }
        leaf.value = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves.iter().map(|l| l.value.data().len()).sum()
    }
}
