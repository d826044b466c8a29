//! Reverse-mode differentiation over a static graph of tensor kernels.
//!
//! A [`Graph`] is built once (per model) with [`GraphBuilder`], parameters
//! live in a separate slot-indexed [`Params`] store, and each call to
//! [`evaluate`] produces a [`Trace`] holding the forward values. [`backward`]
//! walks the trace in reverse topological order and returns gradients for
//! every parameter slot and every bound input, which is what the attacks and
//! saliency maps need.

mod graph;
pub mod io;
pub mod kernels;

pub use graph::{
    backward, evaluate, grad_check, sgd_step, vjp, Gradients, Graph, GraphBuilder, Node, NodeId,
    Params, Trace,
};
pub use kernels::{OpKind, Padding};
