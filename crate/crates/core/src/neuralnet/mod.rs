//! Small from-scratch neural-network engine: dense and 2-D convolution
//! layers, nearest-neighbour upsampling, mean-squared-error backpropagation
//! and SGD. Everything runs in `f64`.
//!
//! Initialization draws from `rand_chacha::ChaCha8Rng` (ChaCha with 8
//! rounds) seeded through `SeedableRng::seed_from_u64`, so the same
//! `NetworkSpec::seed` always produces the same weights.

mod check;
mod io;
mod network;
mod spec;
mod tensor;
mod train;

pub use check::{gradcheck_cases, gradcheck_suite, GradcheckResult, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use io::{
    content_id, decode_weights, encode_weights, load_weights, load_weights_into, save_weights, WeightsFormat,
    FORMAT_VERSION, MAGIC,
};
pub use network::{Gradients, LayerParams, Network, Standardization};
pub use spec::{Activation, LayerSpec, NetworkSpec};
pub use tensor::Tensor;
pub use train::{batch_gradients, gradient_check, train, Loss, Sgd, TrainingConfig};
