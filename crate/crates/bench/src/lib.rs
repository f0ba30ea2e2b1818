//! Shared fixtures for the criterion benchmarks.

use cdlm_core::model::{init_params, Backbone, KHead, ModelConfig};
use cdlm_core::numerics::Scalar;

/// Default-size model with a randomized output head so decoding exercises
/// realistic (non-degenerate) distributions.
pub fn bench_model<S: Scalar>(seed: u64) -> (Backbone<S>, KHead<S>) {
    use rand::{Rng, SeedableRng};
    let cfg = ModelConfig::default();
    let (mut backbone, mut khead) = init_params::<S>(&cfg, seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xBE7C);
    for v in backbone.out_w.data_mut() {
        *v = cdlm_core::numerics::scalar(rng.gen_range(-0.3..0.3));
    }
    for v in khead.w2.data_mut() {
        *v = cdlm_core::numerics::scalar(rng.gen_range(-0.3..0.3));
    }
    (backbone, khead)
}
