//! Minimal differentiable core: tensors, a fixed layer catalog with
//! analytic gradients (parameters and inputs), Adam, seeded randomness and
//! finite-difference checking.

mod gemm;
pub mod gradcheck;
pub mod layer;
pub mod net;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{check_target, grad_check, Differentiable, GradCheckReport};
pub use layer::{LayerSpec, DEFAULT_LEAKY_SLOPE};
pub use net::{trace_kinks, ForwardCache, Mode, Net, NetBuilder};
pub use params::{adam_step, AdamConfig, BlockId, BlockLayout, Gradients, ParamStore};
pub use rng::RngStream;
pub use tensor::{Shape3, Tensor, TensorMap};
