//! Shared test helpers. The oracle module is a loop-only reimplementation
//! that shares no code with the library's graph or kernels.
#![allow(dead_code)]

pub mod oracle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Moves zero-initialized biases and norm shifts off zero. Freshly built
/// models put some relu inputs exactly on the kink, where central
/// differences see half the slope.
pub fn generic_point(mut ps: helix_core::tensor::ParamSet, seed: u64) -> helix_core::tensor::ParamSet {
    let mut r = rng(seed);
    for (path, p) in ps.iter_mut() {
        if p.trainable && (path.ends_with("bias") || path.ends_with("beta")) {
            p.value = helix_core::tensor::Tensor::uniform(p.value.shape(), -0.3, 0.3, &mut r);
        }
    }
    ps
}
