//! Reverse-mode differentiation over a per-invocation tape.
//!
//! A [`Graph`] is an append-only arena of nodes. Leaves hold input or
//! parameter tensors; interior nodes hold a [`DiffOp`] plus its cached
//! forward value (evaluation is eager). Because nodes are append-only,
//! node order is already a topological order and the backward sweep is a
//! single reverse pass with sum-accumulation at fan-out.
//!
//! Tapes are cheap, owned by one invocation, and never shared.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A differentiable operation: a pure forward map plus the matching
/// vector-Jacobian product. `backward` must return one gradient per
/// input, each shaped exactly like that input.
pub trait DiffOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Per-input gradients given the upstream gradient. `output` is the
    /// cached forward value (a pure function of `inputs`, passed to spare
    /// ops like softmax a recomputation).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

struct Node {
    op: Option<Box<dyn DiffOp>>,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Insert a leaf (input or parameter) tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Apply an op to existing nodes, evaluating it immediately.
    pub fn apply(&mut self, op: impl DiffOp + 'static, inputs: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = op.forward(&refs)?;
        self.nodes.push(Node {
            op: Some(Box::new(op)),
            inputs: inputs.to_vec(),
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from `output` seeded with `seed`. Gradients
    /// accumulate by sum where a node fans out into several consumers.
    /// Leaves not reachable from `output` simply end up with no gradient;
    /// [`Gradients::wrt`] reports zeros for them.
    pub fn backward(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                lhs: seed.shape().to_vec(),
                rhs: out_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let refs: Vec<&Tensor> =
                    node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let input_grads = op.backward(&refs, &node.value, &grad_out);
                debug_assert_eq!(
                    input_grads.len(),
                    node.inputs.len(),
                    "{}: backward must return one gradient per input",
                    op.name()
                );
                for (input_id, g) in node.inputs.iter().zip(input_grads) {
                    debug_assert_eq!(
                        g.shape(),
                        self.nodes[input_id.0].value.shape(),
                        "{}: gradient shape mismatch for input {}",
                        op.name(),
                        input_id.0
                    );
                    match &mut grads[input_id.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            // Leaves keep their accumulated gradient.
            if node.op.is_none() {
                grads[i] = Some(grad_out);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a node; zeros if the node did not
    /// participate in the output (disconnected leaf).
    pub fn wrt(&self, id: NodeId, graph: &Graph) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros_like(graph.value(id)),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn identity_gradient_is_seed() {
        // f(x) = x with seed 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.5));
        let grads = g.backward(x, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.wrt(x, &g).item(), 1.0);
    }

    #[test]
    fn quadratic_sum_gradient() {
        // f(x) = sum(x∘x) at x = [1,2,3] → grad [2,4,6]
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.apply(ops::Mul, &[x, x]).unwrap();
        let y = g.apply(ops::SumAll, &[sq]).unwrap();
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.wrt(x, &g).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fanout_accumulates_by_sum() {
        // y = f(x) + f(x) has gradient exactly twice the single copy.
        let x0 = Tensor::new(vec![2], vec![0.3, -1.2]).unwrap();

        let single = {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone());
            let sq = g.apply(ops::Mul, &[x, x]).unwrap();
            let y = g.apply(ops::SumAll, &[sq]).unwrap();
            g.backward(y, Tensor::scalar(1.0)).unwrap().wrt(x, &g)
        };

        let mut g = Graph::new();
        let x = g.leaf(x0);
        let a = g.apply(ops::Mul, &[x, x]).unwrap();
        let b = g.apply(ops::Mul, &[x, x]).unwrap();
        let s = g.apply(ops::Add, &[a, b]).unwrap();
        let y = g.apply(ops::SumAll, &[s]).unwrap();
        let doubled = g.backward(y, Tensor::scalar(1.0)).unwrap().wrt(x, &g);

        for (d, s) in doubled.data().iter().zip(single.data()) {
            assert_eq!(*d, 2.0 * s);
        }
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let unused = g.leaf(Tensor::new(vec![2], vec![5.0, 6.0]).unwrap());
        let y = g.apply(ops::Mul, &[x, x]).unwrap();
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.wrt(unused, &g).data(), &[0.0, 0.0]);
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_rejects_bad_seed_shape() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(g.backward(x, Tensor::scalar(1.0)).is_err());
    }
}
