//! Model zoo: dense, locally connected, full-width and bounded-width circular
//! convolution stacks, and a small vision transformer, plus the training loop.
//!
//! A model is described by a serializable [`ModelSpec`] (a layer list) and
//! compiled into an autodiff graph by [`Model::build`]. Hidden layers of the
//! convolutional family keep the input extents, so a linear stack is one
//! `D x D` map per layer followed by a dense `D -> classes` head.

mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::Padding;
use crate::error::{Error, Result};

pub use model::{Flow, LayerInfo, Model};
pub use train::{train, EpochStats, TrainConfig, TrainedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    /// Flattens its input if needed.
    Dense { out: usize },
    /// Stride 1, `k x k` receptive field, independent weights per position.
    LocallyConnected { k: usize, channels: usize },
    /// Circular convolution whose kernel spans the whole input.
    ConvFullWidth { channels: usize },
    /// `k x k` convolution, `k` at most the input width.
    ConvBounded { k: usize, channels: usize },
    /// Non-overlapping patches projected to `dim`, plus a learned positional
    /// embedding. `shared = false` gives every patch its own projection.
    PatchEmbed { patch: usize, shared: bool, dim: usize },
    /// Pre-norm residual block: multi-head self-attention, then a GELU MLP.
    AttentionBlock { heads: usize, mlp: usize },
    /// Mean over tokens.
    MeanPool,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::LocallyConnected { .. } => "locally_connected",
            LayerKind::ConvFullWidth { .. } => "conv_full_width",
            LayerKind::ConvBounded { .. } => "conv_bounded",
            LayerKind::PatchEmbed { .. } => "patch_embed",
            LayerKind::AttentionBlock { .. } => "attention_block",
            LayerKind::MeanPool => "mean_pool",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub bias: bool,
}

impl LayerSpec {
    pub fn linear(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            activation: Activation::None,
            bias: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `[C, H, W]`
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub padding: Padding,
    /// Weights start uniform in `±init_scale * sqrt(1 / fan_in)`.
    #[serde(default = "unit")]
    pub init_scale: f64,
}

fn unit() -> f64 {
    1.0
}

/// The four linear-layer parametrizations compared throughout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Fc,
    Lc { k: usize },
    Fwc,
    Bwc { k: usize },
}

impl Family {
    pub fn tag(&self) -> String {
        match self {
            Family::Fc => "fc".into(),
            Family::Lc { k } => format!("lc{k}"),
            Family::Fwc => "fwc".into(),
            Family::Bwc { k } => format!("bwc{k}"),
        }
    }
}

impl ModelSpec {
    /// `hidden` layers of the given family (each preserving `C x H x W`, so the
    /// dense family has width `C*H*W`), then a dense head.
    pub fn preset(family: Family, input: [usize; 3], classes: usize, hidden: usize, activation: Activation) -> Self {
        let [c, h, w] = input;
        let kind = match family {
            Family::Fc => LayerKind::Dense { out: c * h * w },
            Family::Lc { k } => LayerKind::LocallyConnected { k, channels: c },
            Family::Fwc => LayerKind::ConvFullWidth { channels: c },
            Family::Bwc { k } => LayerKind::ConvBounded { k, channels: c },
        };
        let mut layers: Vec<LayerSpec> = (0..hidden)
            .map(|_| LayerSpec {
                kind: kind.clone(),
                activation,
                bias: false,
            })
            .collect();
        layers.push(LayerSpec::linear(LayerKind::Dense { out: classes }));
        let mut name = family.tag();
        if hidden > 1 {
            name = format!("deep_{name}");
        }
        if activation != Activation::None {
            name = format!("{name}_relu");
        }
        ModelSpec {
            name,
            input,
            classes,
            layers,
            padding: Padding::Circular,
            init_scale: 1.0,
        }
    }

    /// Two attention blocks (4 heads, width 64), mean pooling, dense head.
    pub fn mini_vit(input: [usize; 3], classes: usize, patch: usize, shared: bool) -> Self {
        let dim = 64;
        let mut layers = vec![LayerSpec {
            kind: LayerKind::PatchEmbed { patch, shared, dim },
            activation: Activation::None,
            bias: true,
        }];
        for _ in 0..2 {
            layers.push(LayerSpec {
                kind: LayerKind::AttentionBlock { heads: 4, mlp: 2 * dim },
                activation: Activation::None,
                bias: true,
            });
        }
        layers.push(LayerSpec::linear(LayerKind::MeanPool));
        layers.push(LayerSpec {
            kind: LayerKind::Dense { out: classes },
            activation: Activation::None,
            bias: true,
        });
        ModelSpec {
            name: format!("{}{patch}", if shared { "vit" } else { "vitloc" }),
            input,
            classes,
            layers,
            padding: Padding::Circular,
            init_scale: 1.0,
        }
    }

    /// Number of layers `L`, head included.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn is_linear(&self) -> bool {
        self.layers.iter().all(|l| {
            l.activation == Activation::None
                && matches!(
                    l.kind,
                    LayerKind::Dense { .. }
                        | LayerKind::LocallyConnected { .. }
                        | LayerKind::ConvFullWidth { .. }
                        | LayerKind::ConvBounded { .. }
                )
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(format!("{}: {m}", self.name)));
        if self.input.contains(&0) || self.classes == 0 {
            return bad(format!("input {:?} / {} classes", self.input, self.classes));
        }
        match self.layers.last() {
            Some(LayerSpec {
                kind: LayerKind::Dense { out },
                activation: Activation::None,
                ..
            }) if *out == self.classes => {}
            _ => return bad(format!("last layer must be a linear dense layer with {} outputs", self.classes)),
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale {}", self.init_scale));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
