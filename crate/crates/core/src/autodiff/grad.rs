use std::collections::{HashMap, HashSet};

use super::tensor::{with_grad_mode, Tensor};

/// Gradients of a scalar `output` with respect to each of `inputs`.
///
/// With `create_graph` the returned gradients are themselves recorded, so a
/// function of them (a gradient norm, say) can be differentiated again.
/// Inputs that `output` does not depend on receive zeros.
pub fn grad(output: &Tensor, inputs: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(
        output.numel(),
        1,
        "grad() needs a scalar output, got {:?}",
        output.shape()
    );
    let seed = Tensor::ones(output.shape());
    grad_with_seed(output, &seed, inputs, create_graph)
}

/// Vector-Jacobian product: propagates `seed` (shaped like `output`) back to `inputs`.
pub fn grad_with_seed(
    output: &Tensor,
    seed: &Tensor,
    inputs: &[&Tensor],
    create_graph: bool,
) -> Vec<Tensor> {
    assert_eq!(
        output.shape(),
        seed.shape(),
        "seed must match the output shape"
    );
    let targets: HashSet<u64> = inputs.iter().map(|t| t.id()).collect();
    let order = topo_order(output);

    // A node is relevant when some requested input is reachable from it.
    let mut relevant: HashSet<u64> = HashSet::new();
    for node in &order {
        let hit = targets.contains(&node.id())
            || node
                .op()
                .map(|op| op.inputs().iter().any(|t| relevant.contains(&t.id())))
                .unwrap_or(false);
        if hit {
            relevant.insert(node.id());
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    with_grad_mode(create_graph, || {
        if relevant.contains(&output.id()) {
            grads.insert(output.id(), seed.clone());
        }
        for node in order.iter().rev() {
            let Some(op) = node.op() else { continue };
            if !relevant.contains(&node.id()) {
                continue;
            }
            let g = if targets.contains(&node.id()) {
                match grads.get(&node.id()) {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads.remove(&node.id()) {
                    Some(g) => g,
                    None => continue,
                }
            };
            let parents = op.inputs();
            let needs: Vec<bool> = parents
                .iter()
                .map(|p| p.requires_grad() && relevant.contains(&p.id()))
                .collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let parent_grads = op.backward(node, &g, &needs);
            for ((parent, pg), need) in parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else {
                    continue;
                };
                match grads.remove(&parent.id()) {
                    Some(acc) => {
                        grads.insert(parent.id(), acc.add(&pg));
                    }
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
    });

    inputs
        .iter()
        .map(|t| {
            grads
                .get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect()
}

/// Tracked nodes reachable from `root`, inputs before the nodes that use them.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.op() {
            for parent in op.inputs() {
                if parent.requires_grad() && !seen.contains(&parent.id()) {
                    stack.push((parent.clone(), false));
                }
            }
        }
    }
    order
}
