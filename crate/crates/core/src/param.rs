//! Named parameter storage with gradient accumulators.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};

/// One model parameter: a named tensor plus its gradient accumulator.
/// Non-trainable entries (running statistics) ride along for checkpointing
/// but are never touched by optimizers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<f32>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape(format!(
                "param {name}: data length {} vs shape {:?}",
                value.len(),
                shape
            )));
        }
        if self.find(&name).is_some() {
            return Err(Error::invalid(format!("duplicate param name {name}")));
        }
        let grad = vec![0.0; value.len()];
        self.params.push(Param { name, shape, value, grad, trainable });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Handle for the param at a set index (ids are index-aligned).
    pub fn id_at(&self, index: usize) -> ParamId {
        debug_assert!(index < self.params.len());
        ParamId(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = 0.0;
            }
        }
    }

    /// Create one leaf per parameter, index-aligned with the set.
    pub fn bind_all<S: Scalar>(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                tape.leaf_from_f32(&p.shape, &p.value).expect("param shape consistent by construction")
            })
            .collect()
    }

    /// Add the tape gradients of the bound leaves onto each accumulator.
    pub fn accumulate<S: Scalar>(&mut self, vars: &[Var], grads: &Gradients<S>) {
        debug_assert_eq!(vars.len(), self.params.len());
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.wrt(v) {
                for (acc, &gv) in p.grad.iter_mut().zip(g) {
                    *acc += gv.to_f64() as f32;
                }
            }
        }
    }

    /// FNV-1a hash over the exact bits of every parameter value. Used to
    /// assert that a pass left the model untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for &v in &p.value {
                h ^= v.to_bits() as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_validates_and_rejects_duplicates() {
        let mut set = ParamSet::new();
        set.add("w", vec![2, 2], vec![1.0; 4], true).unwrap();
        assert!(set.add("w", vec![1], vec![0.0], true).is_err());
        assert!(set.add("b", vec![3], vec![0.0; 2], true).is_err());
    }

    #[test]
    fn zero_grad_clears_accumulators() {
        let mut set = ParamSet::new();
        let id = set.add("w", vec![2], vec![1.0, 2.0], true).unwrap();
        set.get_mut(id).grad.copy_from_slice(&[3.0, 4.0]);
        set.zero_grad();
        assert_eq!(set.get(id).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn checksum_tracks_value_bits() {
        let mut set = ParamSet::new();
        let id = set.add("w", vec![1], vec![1.0], true).unwrap();
        let before = set.checksum();
        set.get_mut(id).value[0] = 1.0000001;
        assert_ne!(before, set.checksum());
    }
}
