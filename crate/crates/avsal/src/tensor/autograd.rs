//! Tape construction and the reverse pass.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::HashSet;

/// Ordered record of the operations reachable from one root tensor.
///
/// The order is a topological sort of the recorded graph (parents before
/// children); replaying it back-to-front visits every node only after all
/// of its consumers, so gradient accumulation is complete when a node's
/// own backward runs. Building or replaying a tape never mutates forward
/// values.
pub struct Tape {
    order: Vec<Tensor>,
    root: Tensor,
}

impl Tape {
    /// Linearize the graph below `root`.
    pub fn for_root(root: &Tensor) -> Tape {
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS; recursion depth would track graph depth.
        enum Step {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut stack = vec![Step::Enter(root.clone())];
        while let Some(step) = stack.pop() {
            match step {
                Step::Enter(t) => {
                    if !t.is_tracked() || !seen.insert(t.id()) {
                        continue;
                    }
                    stack.push(Step::Exit(t.clone()));
                    for p in &t.inner.parents {
                        stack.push(Step::Enter(p.clone()));
                    }
                }
                Step::Exit(t) => order.push(t),
            }
        }
        Tape {
            order,
            root: root.clone(),
        }
    }

    /// Node ids in recorded (topological) order. Exposed for invariant tests.
    pub fn order_ids(&self) -> Vec<u64> {
        self.order.iter().map(Tensor::id).collect()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Run the reverse pass from the (scalar) root: seeds d(root)/d(root) = 1
    /// and accumulates gradients into every tracked tensor below it.
    pub fn backward(&self) -> Result<()> {
        if self.root.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.root.shape()
            )));
        }
        if !self.root.is_tracked() {
            // Nothing reachable; a constant has no gradients to populate.
            return Ok(());
        }
        self.root.accumulate_grad(&[1.0]);
        for t in self.order.iter().rev() {
            if let Some(back) = &t.inner.backward {
                let has_grad = t.inner.grad.borrow().is_some();
                if has_grad {
                    back(&t.inner);
                }
            }
        }
        Ok(())
    }
}

/// Reverse pass from a scalar loss: builds the tape and replays it.
pub fn backward(loss: &Tensor) -> Result<()> {
    Tape::for_root(loss).backward()
}
