//! Numeric substrate: dense f64 tensors, a reverse-mode tape, the network
//! building blocks, Adam, checkpoint I/O, and a finite-difference oracle.

pub mod adam;
pub mod check;
pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod tensor;

pub use adam::Adam;
pub use graph::{GradMap, Graph, NodeId};
pub use layers::{Act, Linear, Mlp, ParamStore, PointEncoder, PointFeatures};
pub use tensor::{bce, l1, logistic, softplus, Tensor};
