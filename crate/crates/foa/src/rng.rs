use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent, reproducible stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used across the crate, so no two consumers share one.
pub(crate) mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const STAGE_BASE: u64 = 10;
    pub const PROBE: u64 = 20;
    pub const EVAL_BASE: u64 = 1 << 40;
}
