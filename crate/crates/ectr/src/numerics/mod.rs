//! Numerical substrate: dense matrices, feed-forward nets with exact
//! backprop, per-sample loss derivatives, optimizer steps, and seeded
//! randomness.

pub mod loss;
pub mod matrix;
pub mod net;
pub mod optim;
pub mod rng;

pub use loss::{loss_value, loss_value_grad_hvp, sigmoid, softplus, LossSpec};
pub use matrix::DenseMatrix;
pub use net::{backprop, forward, Activation, ForwardCache, Layer, NetGrads, PredictorParams};
pub use optim::{Direction, OptimKind, Optimizer};
pub use rng::{Rng, RNG_ALGORITHM};
