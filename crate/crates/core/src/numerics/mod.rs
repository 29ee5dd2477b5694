//! Dense tensors, reverse-mode gradients and finite-difference checks.

mod gradcheck;
mod graph;
mod io;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{
    gradient_check, gradient_check_elements, gradient_check_subset, relative_error, GradCheckReport, REL_ERR_FLOOR,
};
pub use graph::{Gradients, Graph, Var};
pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor, FORMAT_VERSION, MAGIC};
pub use params::{ParamId, ParamStore};
pub use scalar::{lit, DType, Scalar};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `stream` of the generator seeded with `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
