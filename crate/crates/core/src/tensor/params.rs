use std::collections::BTreeMap;

use super::{Gradients, Graph, Result, Tensor, TensorError, Var};

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Partition {
    /// Autoencoder weights (tokenizer, encoder, decoder).
    Mae,
    /// Token-sampling network weights.
    Sampler,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Mae => 0,
            Partition::Sampler => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Partition::Mae),
            1 => Some(Partition::Sampler),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub partition: Partition,
    /// Whether decoupled weight decay applies (false for biases, norms, mask token).
    pub decay: bool,
}

/// Named parameters in a deterministic (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

pub type Grads = BTreeMap<String, Tensor>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, partition: Partition, decay: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.params.insert(
            name,
            Param {
                value,
                partition,
                decay,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn num_scalars_in(&self, partition: Partition) -> usize {
        self.params
            .values()
            .filter(|p| p.partition == partition)
            .map(|p| p.value.len())
            .sum()
    }

    /// Registers every parameter as a trainable leaf on `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), graph.param(p.value.clone())))
            .collect();
        Binding { vars }
    }

    /// Zero gradient for every parameter.
    pub fn zero_grads(&self) -> Grads {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.value.shape().to_vec())))
            .collect()
    }
}

/// Parameter name → leaf on one graph.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    /// Gradient per parameter; parameters the loss never touched get zeros.
    pub fn collect(&self, grads: &Gradients, params: &ParamSet) -> Grads {
        params
            .iter()
            .map(|(name, p)| {
                let g = self
                    .vars
                    .get(name)
                    .and_then(|v| grads.get(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::scalar(1.0), Partition::Mae, true).unwrap();
        assert!(matches!(
            ps.insert("a", Tensor::scalar(2.0), Partition::Sampler, true),
            Err(TensorError::DuplicateParam(_))
        ));
        assert_eq!(ps.num_scalars_in(Partition::Sampler), 0);
    }

    #[test]
    fn untouched_params_get_zero_grads() {
        let mut ps = ParamSet::new();
        ps.insert("used", Tensor::vector(vec![1.0, 2.0]), Partition::Mae, true).unwrap();
        ps.insert("unused", Tensor::vector(vec![3.0]), Partition::Sampler, true).unwrap();
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let s = g.sum(b.var("used").unwrap()).unwrap();
        let grads = b.collect(&g.backward(s).unwrap(), &ps);
        assert_eq!(grads["used"].data(), &[1.0, 1.0]);
        assert_eq!(grads["unused"].data(), &[0.0]);
    }
}
