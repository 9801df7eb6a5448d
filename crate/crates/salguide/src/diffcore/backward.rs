//! Reverse-mode gradient accumulation over the recorded graph.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

use super::tensor::{Tensor, TensorId};

/// Gradients keyed by parameter identity, one entry per requested parameter.
pub struct GradientMap {
    grads: HashMap<TensorId, Tensor>,
    disconnected: HashSet<TensorId>,
}

impl GradientMap {
    pub fn get(&self, param: &Tensor) -> &Tensor {
        self.grads
            .get(&param.id())
            .expect("parameter was not in the wrt list")
    }

    /// True when the loss had no graph path to this parameter (zero gradient).
    pub fn is_disconnected(&self, param: &Tensor) -> bool {
        self.disconnected.contains(&param.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Iterative post-order over grad-requiring ancestors of `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (node, expanded)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.inner.id) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in &node.inner.parents {
            if p.requires_grad() && !visited.contains(&p.inner.id) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Reverse-mode gradients of a scalar `loss` with respect to `wrt`.
///
/// With `create_graph` the returned gradients are themselves graph nodes and
/// support a further backward pass. Parameters the loss does not reach get a
/// zero gradient and are flagged disconnected.
pub fn backward(loss: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<GradientMap> {
    if loss.len() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }

    let mut accum: HashMap<u64, Tensor> = HashMap::new();
    if loss.requires_grad() {
        let order = topo_order(loss);
        let seed = Tensor::from_values(loss.shape(), vec![1.0])?;
        accum.insert(loss.inner.id, seed);

        for node in order.iter().rev() {
            let Some(g) = accum.remove(&node.inner.id) else {
                continue;
            };
            let keep = wrt.iter().any(|w| w.id() == node.id());
            if keep {
                accum.insert(node.inner.id, g.clone());
            }
            let Some(vjp) = &node.inner.vjp else {
                continue;
            };
            let parent_grads = vjp(&g, &node.inner.parents);
            debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
            for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                if !parent.requires_grad() {
                    continue;
                }
                let pg = if create_graph { pg } else { pg.detach() };
                match accum.remove(&parent.inner.id) {
                    Some(acc) => {
                        accum.insert(parent.inner.id, acc.add(&pg)?);
                    }
                    None => {
                        accum.insert(parent.inner.id, pg);
                    }
                }
            }
        }
    }

    let mut grads = HashMap::new();
    let mut disconnected = HashSet::new();
    for w in wrt {
        match accum.get(&w.inner.id) {
            Some(g) => {
                grads.insert(w.id(), g.clone());
            }
            None => {
                grads.insert(w.id(), Tensor::zeros(w.shape()));
                disconnected.insert(w.id());
            }
        }
    }
    Ok(GradientMap {
        grads,
        disconnected,
    })
}
