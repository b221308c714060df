use std::collections::HashMap;

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor with an accumulated gradient slot.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    /// Free-form group tag used for freezing whole sub-models at once.
    pub group: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        tensor: Tensor,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            group: group.into(),
            tensor,
            grad: None,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets the trainable flag of every parameter tagged with `group`.
    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    /// Adds per-parameter gradients into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (i, g) in grads.per_param.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut self.params[i];
            match &mut p.grad {
                Some(slot) => slot
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, v)| *s += v),
                None => {
                    p.grad = Some(
                        Tensor::new(p.tensor.shape().to_vec(), g.clone())
                            .expect("gradient shape follows parameter"),
                    )
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Structural fingerprint: names and shapes in registration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect()
    }
}

/// Gradients w.r.t. parameters produced by one or more backward passes.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) per_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.per_param.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn is_empty(&self) -> bool {
        self.per_param.iter().all(|g| g.is_none())
    }

    pub(crate) fn add(&mut self, id: ParamId, g: &[f64]) {
        if self.per_param.len() <= id.0 {
            self.per_param.resize(id.0 + 1, None);
        }
        match &mut self.per_param[id.0] {
            Some(slot) => slot.iter_mut().zip(g).for_each(|(s, v)| *s += v),
            None => self.per_param[id.0] = Some(g.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("w", "a", Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(
            s.add("w", "b", Tensor::zeros(vec![1])),
            Err(NumError::DuplicateParam(_))
        ));
        assert!(s.id("w").is_ok());
        assert!(s.id("nope").is_err());
    }

    #[test]
    fn group_freeze() {
        let mut s = ParamStore::new();
        let a = s.add("a", "text", Tensor::zeros(vec![1])).unwrap();
        let b = s.add("b", "agg", Tensor::zeros(vec![1])).unwrap();
        assert_eq!(s.set_group_trainable("text", false), 1);
        assert!(!s.get(a).trainable);
        assert!(s.get(b).trainable);
    }
}
