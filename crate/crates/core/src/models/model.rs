use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Activation, LayerKind, ModelSpec};
use crate::autodiff::{self, io, Graph, GraphBuilder, NodeId, OpKind, Params};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Per-example activation layout between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flow {
    Image { c: usize, h: usize, w: usize },
    Flat { d: usize },
    Tokens { t: usize, d: usize },
}

impl Flow {
    pub fn numel(&self) -> usize {
        match *self {
            Flow::Image { c, h, w } => c * h * w,
            Flow::Flat { d } => d,
            Flow::Tokens { t, d } => t * d,
        }
    }
}

/// Where a layer lives in the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub kind: LayerKind,
    pub activation: Activation,
    pub input: Flow,
    pub output: Flow,
    /// Main weight slot, for layers that have one.
    pub weight: Option<usize>,
    pub bias: Option<usize>,
    /// Layer output after its activation.
    pub node: NodeId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
    graph: Graph,
    layers: Vec<LayerInfo>,
    x: NodeId,
    logits: NodeId,
    loss: NodeId,
}

const LN_EPS: f64 = 1e-5;
/// Forward passes are chunked to bound memory.
const CHUNK: usize = 256;

struct Builder {
    g: GraphBuilder,
    init: Vec<Tensor>,
    seed: u64,
    scale: f64,
}

impl Builder {
    fn param(&mut self, name: &str, shape: &[usize], fan_in: usize) -> (NodeId, usize) {
        let slot = self.g.next_slot();
        let id = self.g.param(name, shape);
        let a = self.scale * (1.0 / fan_in.max(1) as f64).sqrt();
        let mut r = rng::rng(rng::derive_str(self.seed, name));
        self.init
            .push(Tensor::from_fn(shape, |_| if a > 0.0 { r.random_range(-a..a) } else { 0.0 }));
        (id, slot)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> NodeId {
        let id = self.g.param(name, shape);
        self.init.push(Tensor::full(shape, value));
        id
    }

    fn bias(&mut self, name: &str, x: NodeId, shape: &[usize]) -> (NodeId, usize) {
        let slot = self.g.next_slot();
        let b = self.constant(name, shape, 0.0);
        (self.g.op(OpKind::AddBias, &[x, b]), slot)
    }

    fn dense(&mut self, name: &str, x: NodeId, n_in: usize, n_out: usize, bias: bool) -> NodeId {
        let (w, _) = self.param(&format!("{name}.w"), &[n_in, n_out], n_in);
        let y = self.g.op(OpKind::MatMul, &[x, w]);
        if bias {
            self.bias(&format!("{name}.b"), y, &[n_out]).0
        } else {
            y
        }
    }

    fn layer_norm(&mut self, name: &str, x: NodeId, d: usize) -> NodeId {
        let g = self.constant(&format!("{name}.g"), &[d], 1.0);
        let b = self.constant(&format!("{name}.b"), &[d], 0.0);
        self.g.op(OpKind::LayerNorm { eps: LN_EPS }, &[x, g, b])
    }
}

impl Model {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let bad = |i: usize, m: String| Error::InvalidSpec(format!("{} layer {i}: {m}", spec.name));
        let mut b = Builder {
            g: Graph::builder(),
            init: Vec::new(),
            seed,
            scale: spec.init_scale,
        };
        let x = b.g.input("x");
        let y = b.g.input("y");
        let [c0, h0, w0] = spec.input;
        let mut flow = Flow::Image { c: c0, h: h0, w: w0 };
        let mut cur = x;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let name = format!("l{i}");
            let input = flow;
            let (mut weight, mut bias) = (None, None);
            let image = |f: Flow| match f {
                Flow::Image { c, h, w } => Ok((c, h, w)),
                other => Err(bad(i, format!("{} needs an image input, got {other:?}", ls.kind.tag()))),
            };
            let mut out = match &ls.kind {
                LayerKind::Dense { out } => {
                    let d = match flow {
                        Flow::Tokens { .. } => {
                            return Err(bad(i, "dense layer on tokens; pool first".into()));
                        }
                        f => f.numel(),
                    };
                    if !matches!(flow, Flow::Flat { .. }) {
                        cur = b.g.op(OpKind::Reshape { tail: vec![d] }, &[cur]);
                    }
                    weight = Some(b.g.next_slot());
                    let (wn, _) = b.param(&format!("{name}.w"), &[d, *out], d);
                    let mut o = b.g.op(OpKind::MatMul, &[cur, wn]);
                    if ls.bias {
                        let (ob, slot) = b.bias(&format!("{name}.b"), o, &[*out]);
                        o = ob;
                        bias = Some(slot);
                    }
                    flow = Flow::Flat { d: *out };
                    o
                }
                LayerKind::ConvFullWidth { channels } | LayerKind::ConvBounded { channels, .. } => {
                    let (c, h, w) = image(flow)?;
                    let (kh, kw) = match ls.kind {
                        LayerKind::ConvBounded { k, .. } => (k, k),
                        _ => (h, w),
                    };
                    if kh == 0 || kh > h || kw > w {
                        return Err(bad(i, format!("kernel {kh}x{kw} larger than input {h}x{w}")));
                    }
                    if ls.bias {
                        // A per-position bias would break translation equivariance.
                        return Err(bad(i, "convolution layers take no bias".into()));
                    }
                    weight = Some(b.g.next_slot());
                    let (wn, _) = b.param(&format!("{name}.w"), &[*channels, c, kh, kw], c * kh * kw);
                    let o = b.g.op(OpKind::Conv { padding: spec.padding }, &[cur, wn]);
                    flow = Flow::Image { c: *channels, h, w };
                    o
                }
                LayerKind::LocallyConnected { k, channels } => {
                    let (c, h, w) = image(flow)?;
                    if *k == 0 || *k > h || *k > w {
                        return Err(bad(i, format!("kernel {k} larger than input {h}x{w}")));
                    }
                    weight = Some(b.g.next_slot());
                    let (wn, _) = b.param(&format!("{name}.w"), &[h, w, *channels, c, *k, *k], c * k * k);
                    let mut o = b.g.op(OpKind::LocallyConnected { padding: spec.padding }, &[cur, wn]);
                    if ls.bias {
                        let (ob, slot) = b.bias(&format!("{name}.b"), o, &[*channels, h, w]);
                        o = ob;
                        bias = Some(slot);
                    }
                    flow = Flow::Image { c: *channels, h, w };
                    o
                }
                LayerKind::PatchEmbed { patch, shared, dim } => {
                    let (c, h, w) = image(flow)?;
                    if *patch == 0 || h % patch != 0 || w % patch != 0 {
                        return Err(bad(i, format!("patch {patch} does not divide {h}x{w}")));
                    }
                    let t = (h / patch) * (w / patch);
                    let f = c * patch * patch;
                    let p = b.g.op(OpKind::Patchify { patch: *patch }, &[cur]);
                    weight = Some(b.g.next_slot());
                    let mut o = if *shared {
                        let (wn, _) = b.param(&format!("{name}.w"), &[f, *dim], f);
                        b.g.op(OpKind::MatMul, &[p, wn])
                    } else {
                        let (wn, _) = b.param(&format!("{name}.w"), &[t, f, *dim], f);
                        b.g.op(OpKind::TokenMatMul, &[p, wn])
                    };
                    if ls.bias {
                        let shape = if *shared { vec![*dim] } else { vec![t, *dim] };
                        let (ob, slot) = b.bias(&format!("{name}.b"), o, &shape);
                        o = ob;
                        bias = Some(slot);
                    }
                    let (pos, _) = b.param(&format!("{name}.pos"), &[t, *dim], *dim);
                    o = b.g.op(OpKind::AddBias, &[o, pos]);
                    flow = Flow::Tokens { t, d: *dim };
                    o
                }
                LayerKind::AttentionBlock { heads, mlp } => {
                    let d = match flow {
                        Flow::Tokens { d, .. } => d,
                        other => return Err(bad(i, format!("attention needs tokens, got {other:?}"))),
                    };
                    if *heads == 0 || d % heads != 0 {
                        return Err(bad(i, format!("{heads} heads do not divide width {d}")));
                    }
                    let n1 = b.layer_norm(&format!("{name}.ln1"), cur, d);
                    let q = b.dense(&format!("{name}.q"), n1, d, d, false);
                    let k = b.dense(&format!("{name}.k"), n1, d, d, false);
                    let v = b.dense(&format!("{name}.v"), n1, d, d, false);
                    let a = b.g.op(OpKind::Attention { heads: *heads }, &[q, k, v]);
                    let a = b.dense(&format!("{name}.o"), a, d, d, ls.bias);
                    let r1 = b.g.op(OpKind::Add, &[cur, a]);
                    let n2 = b.layer_norm(&format!("{name}.ln2"), r1, d);
                    let m = b.dense(&format!("{name}.fc1"), n2, d, *mlp, ls.bias);
                    let m = b.g.op(OpKind::Gelu, &[m]);
                    let m = b.dense(&format!("{name}.fc2"), m, *mlp, d, ls.bias);
                    b.g.op(OpKind::Add, &[r1, m])
                }
                LayerKind::MeanPool => {
                    let d = match flow {
                        Flow::Tokens { d, .. } => d,
                        other => return Err(bad(i, format!("mean pool needs tokens, got {other:?}"))),
                    };
                    flow = Flow::Flat { d };
                    b.g.op(OpKind::MeanPool, &[cur])
                }
            };
            match ls.activation {
                Activation::None => {}
                Activation::Relu => out = b.g.op(OpKind::Relu, &[out]),
                Activation::Gelu => out = b.g.op(OpKind::Gelu, &[out]),
            }
            layers.push(LayerInfo {
                kind: ls.kind.clone(),
                activation: ls.activation,
                input,
                output: flow,
                weight,
                bias,
                node: out,
            });
            cur = out;
        }
        let logits = cur;
        let loss = b.g.op(OpKind::CrossEntropy, &[logits, y]);
        b.g.output("logits", logits);
        b.g.output("loss", loss);
        Ok(Model {
            spec: spec.clone(),
            params: Params(b.init),
            graph: b.g.finish(),
            layers,
            x,
            logits,
            loss,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        autodiff::sgd_step(&self.graph, &mut self.params, grads, lr)
    }

    pub fn param_count(&self) -> usize {
        self.params.total_len()
    }

    pub fn with_params(&self, params: Params) -> Result<Model> {
        for (slot, t) in params.0.iter().enumerate() {
            if t.shape() != self.graph.param_shape(slot) {
                return Err(Error::Shape {
                    context: format!("param `{}`", self.graph.param_name(slot)),
                    detail: format!("expected {:?}, got {:?}", self.graph.param_shape(slot), t.shape()),
                });
            }
        }
        let mut m = self.clone();
        m.params = params;
        Ok(m)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.spec.input;
        if x.rank() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::Shape {
                context: format!("model `{}` input", self.spec.name),
                detail: format!("expected [B, {c}, {h}, {w}], got {:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Logits `[B, classes]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n * self.spec.classes);
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let xb = if idx.len() == n { x.clone() } else { x.gather_outer(&idx) };
            let tr = autodiff::evaluate(&self.graph, &self.params, &[("x", &xb)], &[self.logits])?;
            out.extend_from_slice(tr.value(self.logits).expect("evaluated").data());
        }
        Tensor::new(vec![n, self.spec.classes], out)
    }

    /// Argmax classes; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok(z.data().chunks(self.spec.classes).map(Tensor::argmax).collect())
    }

    pub fn accuracy(&self, d: &Dataset) -> Result<f64> {
        if d.is_empty() {
            return Ok(0.0);
        }
        let p = self.predict(&d.images)?;
        Ok(p.iter().zip(&d.labels).filter(|(a, b)| a == b).count() as f64 / d.len() as f64)
    }

    /// Mean cross-entropy and its parameter gradients.
    pub fn loss_and_grad(&self, x: &Tensor, labels: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        self.check_input(x)?;
        let tr = autodiff::evaluate(&self.graph, &self.params, &[("x", x), ("y", labels)], &[self.loss])?;
        let loss = tr.value(self.loss).expect("evaluated").item();
        let g = autodiff::backward(&tr, self.loss)?;
        Ok((loss, g.params))
    }

    /// Mean cross-entropy, its gradient with respect to `x`, and the logits.
    pub fn input_grad(&self, x: &Tensor, labels: &Tensor) -> Result<(f64, Tensor, Tensor)> {
        self.check_input(x)?;
        let tr = autodiff::evaluate(&self.graph, &self.params, &[("x", x), ("y", labels)], &[self.loss])?;
        let loss = tr.value(self.loss).expect("evaluated").item();
        let logits = tr.value(self.logits).expect("evaluated").clone();
        let g = autodiff::backward(&tr, self.loss)?;
        let gx = g.input("x").cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((loss, gx, logits))
    }

    /// Gradient of `sum_b seed[b, :] . logits[b, :]` with respect to `x`.
    pub fn logit_vjp(&self, x: &Tensor, seed: Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let tr = autodiff::evaluate(&self.graph, &self.params, &[("x", x)], &[self.logits])?;
        let g = autodiff::vjp(&tr, self.logits, seed)?;
        Ok(g.input("x").cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
    }

    /// Output of layer `l` (after its activation) for a batch.
    pub fn layer_output(&self, x: &Tensor, l: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let id = self.layers[l].node;
        let tr = autodiff::evaluate(&self.graph, &self.params, &[("x", x)], &[id])?;
        Ok(tr.into_value(id).expect("evaluated"))
    }

    pub fn input_node(&self) -> NodeId {
        self.x
    }

    /// Writes `<stem>.fbt` (weights) and `<stem>.json` (the spec).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let names: Vec<&str> = (0..self.graph.param_count()).map(|s| self.graph.param_name(s)).collect();
        let entries: Vec<(&str, &Tensor)> = names.iter().copied().zip(self.params.0.iter()).collect();
        std::fs::write(stem.with_extension("fbt"), io::encode_tensors(&entries))?;
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Model> {
        let spec: ModelSpec = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let model = Model::build(&spec, 0)?;
        let entries = io::decode_tensors(&std::fs::read(stem.with_extension("fbt"))?)?;
        model.params_from_entries(entries)
    }

    /// Matches container entries to slots by name.
    pub fn params_from_entries(&self, entries: Vec<(String, Tensor)>) -> Result<Model> {
        let mut params = Vec::with_capacity(self.graph.param_count());
        let mut by_name: std::collections::BTreeMap<String, Tensor> = entries.into_iter().collect();
        for slot in 0..self.graph.param_count() {
            let name = self.graph.param_name(slot);
            let t = by_name.remove(name).ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks `{name}`")))?;
            params.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::InvalidArgument(format!("checkpoint has unknown tensor `{extra}`")));
        }
        self.with_params(Params(params))
    }
}
