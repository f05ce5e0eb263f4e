//! Network definition, optimizers and checkpoints.

pub mod checkpoint;
mod network;
mod optim;
mod spec;

pub use network::{Forward, Mode, Network, Param, BN_EPS, BN_MOMENTUM};
pub use optim::{Optimizer, OptimizerKind};
pub use spec::{LayerSpec, NetworkSpec, MNIST_MLP_KEEP, Z_DIM};
