//! Dense tensors and the neural primitives, each paired with a hand-written
//! vector-Jacobian product.

mod ops;
mod scalar;
mod tensor;

pub use ops::{
    cross_entropy, gelu, gelu_vjp, layer_norm, layer_norm_forward, layer_norm_vjp, matmul,
    matmul_vjp, softmax_rows, softmax_rows_vjp, LayerNormCache, DEFAULT_LN_EPS,
};
pub use scalar::{DType, Scalar};
pub use tensor::{max_rel_err, Tensor};
pub(crate) use ops::softmax_in_place;
pub(crate) use tensor::{gemm, MatMut, MatRef};

/// Deterministic generator behind every random draw: ChaCha with 8 rounds,
/// seeded from a `u64`. The stream is identical on every platform.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
