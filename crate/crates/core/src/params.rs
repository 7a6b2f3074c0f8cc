//! Named, ordered parameter storage.
//!
//! Parameters live in insertion order in a plain `Vec`; the order is the
//! canonical one used by the optimizer, the checkpoint format, and
//! gradient collection, so training stays bit-deterministic (no hash-map
//! iteration anywhere near the math).

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Register a parameter; duplicate names are construction bugs.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            self.position(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.entries[i].1)
    }

    /// Replace the tensor behind an existing name (shape-checked).
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.position(name) {
            Some(i) => {
                if self.entries[i].1.shape() != tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "param set",
                        lhs: self.entries[i].1.shape().to_vec(),
                        rhs: tensor.shape().to_vec(),
                    });
                }
                self.entries[i].1 = tensor;
                Ok(())
            }
            None => Err(Error::invalid(format!("unknown parameter {name}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), &mut *t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

/// A ParamSet bound into a graph as leaves, one per parameter, in set
/// order. Model builders look leaves up by name; after backward,
/// [`BoundParams::gradients`] collects per-parameter gradients in the
/// same order.
pub struct BoundParams<'a> {
    set: &'a ParamSet,
    ids: Vec<NodeId>,
}

impl<'a> BoundParams<'a> {
    pub fn bind(graph: &mut Graph, set: &'a ParamSet) -> Self {
        let ids = set
            .iter()
            .map(|(_, t)| graph.leaf(t.clone()))
            .collect();
        BoundParams { set, ids }
    }

    /// Bind against caller-created leaves (one per parameter, in set
    /// order). The finite-difference checks use this to treat parameters
    /// as probe-able inputs.
    pub fn from_ids(set: &'a ParamSet, ids: Vec<NodeId>) -> Self {
        assert_eq!(ids.len(), set.len(), "one leaf per parameter");
        BoundParams { set, ids }
    }

    /// Leaf node of a parameter; missing names are wiring bugs.
    pub fn id(&self, name: &str) -> NodeId {
        match self.set.position(name) {
            Some(i) => self.ids[i],
            None => panic!("parameter {name} not bound"),
        }
    }

    pub fn set(&self) -> &ParamSet {
        self.set
    }

    /// Per-parameter gradients in set order (zeros for parameters the
    /// output does not depend on).
    pub fn gradients(&self, graph: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.ids.iter().map(|&id| grads.wrt(id, graph)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_insertion_order() {
        let mut ps = ParamSet::new();
        ps.add("b", Tensor::scalar(2.0));
        ps.add("a", Tensor::scalar(1.0));
        let names: Vec<&str> = ps.names().collect();
        assert_eq!(names, ["b", "a"]);
    }

    #[test]
    fn set_checks_shape() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros(&[2, 3]));
        assert!(ps.set("w", Tensor::zeros(&[3, 2])).is_err());
        assert!(ps.set("missing", Tensor::zeros(&[1])).is_err());
        assert!(ps.set("w", Tensor::full(&[2, 3], 1.0)).is_ok());
        assert_eq!(ps.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(0.0));
        ps.add("w", Tensor::scalar(1.0));
    }
}
