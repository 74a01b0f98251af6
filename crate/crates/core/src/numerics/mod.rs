//! Dense tensors, a reverse-mode tape over a fixed op set, parameters,
//! optimizers and the seeded random stream everything else draws from.

mod kernels;
mod optim;
mod params;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use optim::{Adam, Optimizer, RmsProp, SgdMomentum};
pub use params::{zero_grads, ParamId, ParamStore, Parameter};
pub use rng::{RngSnapshot, RngState};
pub use scalar::Scalar;
pub use tape::{dropout, DropoutMask, Grads, Tape, Var};
pub use tensor::Tensor;

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
