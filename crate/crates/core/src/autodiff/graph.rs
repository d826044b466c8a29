use std::collections::BTreeMap;

use crate::autodiff::kernels::{self, OpKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
pub enum Node {
    Input { name: String },
    Param { slot: usize },
    Op { kind: OpKind, args: Vec<NodeId> },
}

/// A static computation graph. Nodes are stored in topological order: every
/// node's arguments have smaller ids than the node itself.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_names: Vec<String>,
    param_shapes: Vec<Vec<usize>>,
    outputs: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn builder() -> GraphBuilder {
        GraphBuilder::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes.len()
    }

    pub fn param_name(&self, slot: usize) -> &str {
        &self.param_names[slot]
    }

    pub fn param_shape(&self, slot: usize) -> &[usize] {
        &self.param_shapes[slot]
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn input(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| matches!(n, Node::Input { name: n } if n == name)).map(NodeId)
    }

    fn describe(&self, id: NodeId) -> String {
        match &self.nodes[id.0] {
            Node::Input { name } => format!("node {} (input `{name}`)", id.0),
            Node::Param { slot } => format!("node {} (param `{}`)", id.0, self.param_names[*slot]),
            Node::Op { kind, .. } => format!("node {} ({})", id.0, kind.name()),
        }
    }

    /// Marks the ancestors of `targets` (inclusive).
    fn ancestors(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut need = vec![false; self.nodes.len()];
        for t in targets {
            need[t.0] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if need[i] {
                if let Node::Op { args, .. } = &self.nodes[i] {
                    for a in args {
                        need[a.0] = true;
                    }
                }
            }
        }
        need
    }
}

#[derive(Default)]
pub struct GraphBuilder {
    graph: Graph,
}

impl GraphBuilder {
    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Node::Input { name: name.to_string() })
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let slot = self.graph.param_shapes.len();
        self.graph.param_names.push(name.to_string());
        self.graph.param_shapes.push(shape.to_vec());
        self.push(Node::Param { slot })
    }

    pub fn op(&mut self, kind: OpKind, args: &[NodeId]) -> NodeId {
        assert_eq!(kind.arity(), args.len(), "{} arity", kind.name());
        assert!(args.iter().all(|a| a.0 < self.graph.nodes.len()));
        self.push(Node::Op { kind, args: args.to_vec() })
    }

    pub fn output(&mut self, name: &str, id: NodeId) {
        self.graph.outputs.insert(name.to_string(), id);
    }

    pub fn next_slot(&self) -> usize {
        self.graph.param_shapes.len()
    }

    pub fn finish(self) -> Graph {
        self.graph
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.graph.nodes.push(node);
        NodeId(self.graph.nodes.len() - 1)
    }
}

/// Parameter tensors indexed by slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Params(pub Vec<Tensor>);

impl Params {
    pub fn zeros_like(graph: &Graph) -> Self {
        Params((0..graph.param_count()).map(|s| Tensor::zeros(graph.param_shape(s))).collect())
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.0[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.0[slot]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.0.iter().map(Tensor::numel).sum()
    }
}

/// Forward values of a single evaluation.
pub struct Trace<'a> {
    graph: &'a Graph,
    params: &'a Params,
    values: Vec<Option<Tensor>>,
}

impl<'a> Trace<'a> {
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        match &self.graph.nodes[id.0] {
            Node::Param { slot } => Some(&self.params.0[*slot]),
            _ => self.values[id.0].as_ref(),
        }
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.graph.output(name).and_then(|id| self.value(id))
    }

    pub fn into_value(mut self, id: NodeId) -> Option<Tensor> {
        match &self.graph.nodes[id.0] {
            Node::Param { slot } => Some(self.params.0[*slot].clone()),
            _ => self.values[id.0].take(),
        }
    }
}

/// Evaluates the ancestors of `targets`. Inputs not needed by any target may be left unbound.
pub fn evaluate<'a>(
    graph: &'a Graph,
    params: &'a Params,
    inputs: &[(&str, &Tensor)],
    targets: &[NodeId],
) -> Result<Trace<'a>> {
    if params.len() != graph.param_count() {
        return Err(Error::InvalidArgument(format!(
            "graph has {} parameter slots, {} supplied",
            graph.param_count(),
            params.len()
        )));
    }
    for (slot, t) in params.0.iter().enumerate() {
        if t.shape() != graph.param_shape(slot) {
            return Err(Error::Shape {
                context: format!("param `{}`", graph.param_name(slot)),
                detail: format!("expected {:?}, got {:?}", graph.param_shape(slot), t.shape()),
            });
        }
    }
    let need = graph.ancestors(targets);
    let mut values: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    for (i, node) in graph.nodes.iter().enumerate() {
        if !need[i] {
            continue;
        }
        match node {
            Node::Input { name } => {
                let t = inputs
                    .iter()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?
                    .1;
                values[i] = Some(t.clone());
            }
            Node::Param { .. } => {}
            Node::Op { kind, args } => {
                let arg_values: Vec<&Tensor> = args
                    .iter()
                    .map(|a| match &graph.nodes[a.0] {
                        Node::Param { slot } => &params.0[*slot],
                        _ => values[a.0].as_ref().expect("topological order"),
                    })
                    .collect();
                let out = kernels::forward(kind, &arg_values).map_err(|e| match e {
                    Error::Shape { detail, .. } => Error::Shape {
                        context: graph.describe(NodeId(i)),
                        detail,
                    },
                    other => other,
                })?;
                values[i] = Some(out);
            }
        }
    }
    Ok(Trace { graph, params, values })
}

/// Gradients with respect to every parameter slot and every bound input.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub inputs: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name)
    }
}

/// Reverse pass from a scalar loss node.
pub fn backward(trace: &Trace<'_>, loss: NodeId) -> Result<Gradients> {
    let v = trace
        .value(loss)
        .ok_or_else(|| Error::InvalidArgument(format!("node {} was not evaluated", loss.0)))?;
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss {
            node: loss.0,
            shape: v.shape().to_vec(),
        });
    }
    let seed = Tensor::full(v.shape(), 1.0);
    vjp(trace, loss, seed)
}

/// Vector-Jacobian product: propagates the cotangent `seed` of node `from`.
pub fn vjp(trace: &Trace<'_>, from: NodeId, seed: Tensor) -> Result<Gradients> {
    let graph = trace.graph;
    let out = trace
        .value(from)
        .ok_or_else(|| Error::InvalidArgument(format!("node {} was not evaluated", from.0)))?;
    if out.shape() != seed.shape() {
        return Err(Error::Shape {
            context: graph.describe(from),
            detail: format!("seed {:?} vs value {:?}", seed.shape(), out.shape()),
        });
    }
    let mut cot: Vec<Option<Tensor>> = vec![None; from.0 + 1];
    cot[from.0] = Some(seed);
    let mut params: Vec<Tensor> = (0..graph.param_count())
        .map(|s| Tensor::zeros(graph.param_shape(s)))
        .collect();
    let mut inputs = BTreeMap::new();
    for i in (0..=from.0).rev() {
        let Some(g) = cot[i].take() else { continue };
        match &graph.nodes[i] {
            Node::Input { name } => {
                inputs
                    .entry(name.clone())
                    .and_modify(|t: &mut Tensor| t.add_assign(&g))
                    .or_insert(g);
            }
            Node::Param { slot } => params[*slot].add_assign(&g),
            Node::Op { kind, args } => {
                let arg_values: Vec<&Tensor> = args
                    .iter()
                    .map(|a| trace.value(*a).expect("evaluated ancestor"))
                    .collect();
                let out = trace.value(NodeId(i)).expect("evaluated node");
                let grads = kernels::backward(kind, &arg_values, out, &g)?;
                for (a, ga) in args.iter().zip(grads) {
                    let Some(ga) = ga else { continue };
                    match &mut cot[a.0] {
                        Some(acc) => acc.add_assign(&ga),
                        slot => *slot = Some(ga),
                    }
                }
            }
        }
    }
    Ok(Gradients { params, inputs })
}

/// Plain gradient descent update `p <- p - lr * g`.
pub fn sgd_step(graph: &Graph, params: &mut Params, grads: &[Tensor], lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    if grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (slot, (p, g)) in params.0.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                context: format!("param `{}`", graph.param_name(slot)),
                detail: format!("gradient {:?} vs param {:?}", g.shape(), p.shape()),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of param `{}`", graph.param_name(slot)),
            });
        }
    }
    for (p, g) in params.0.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

/// Largest relative discrepancy between reverse-mode gradients and central
/// differences with step `h`, over every parameter entry and every input
/// entry. The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)` with
/// `floor = 1e-3 * max |numeric| + 1e-12` taken over all coordinates, so
/// coordinates whose true derivative is numerically zero do not dominate.
pub fn grad_check(
    graph: &Graph,
    params: &Params,
    inputs: &[(&str, &Tensor)],
    loss: NodeId,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::InvalidArgument(format!("step {h} outside (0, 1e-3]")));
    }
    let trace = evaluate(graph, params, inputs, &[loss])?;
    let analytic = backward(&trace, loss)?;
    let eval = |p: &Params, ins: &[(&str, &Tensor)]| -> Result<f64> {
        Ok(evaluate(graph, p, ins, &[loss])?.value(loss).unwrap().item())
    };
    let mut pairs: Vec<(f64, f64)> = Vec::new();

    let mut work = params.clone();
    for slot in 0..params.len() {
        for j in 0..params.0[slot].numel() {
            let orig = work.0[slot].data()[j];
            work.0[slot].data_mut()[j] = orig + h;
            let up = eval(&work, inputs)?;
            work.0[slot].data_mut()[j] = orig - h;
            let down = eval(&work, inputs)?;
            work.0[slot].data_mut()[j] = orig;
            pairs.push((analytic.params[slot].data()[j], (up - down) / (2.0 * h)));
        }
    }
    for (k, (name, t)) in inputs.iter().enumerate() {
        let Some(ga) = analytic.inputs.get(*name) else { continue };
        let mut moved = (*t).clone();
        for j in 0..t.numel() {
            let orig = moved.data()[j];
            let mut run = |v: f64| -> Result<f64> {
                moved.data_mut()[j] = v;
                let mut ins: Vec<(&str, &Tensor)> = inputs.to_vec();
                ins[k] = (name, &moved);
                eval(params, &ins)
            };
            let up = run(orig + h)?;
            let down = run(orig - h)?;
            moved.data_mut()[j] = orig;
            pairs.push((ga.data()[j], (up - down) / (2.0 * h)));
        }
    }
    let floor = 1e-3 * pairs.iter().fold(0.0f64, |m, p| m.max(p.1.abs())) + 1e-12;
    Ok(pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max))
}
