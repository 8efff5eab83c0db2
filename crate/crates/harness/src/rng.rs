use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream holding the task draw, the ground truth and the observation noise.
pub const PROBLEM_STREAM: u64 = 0;

/// Stream of chain `c` is `CHAIN_STREAM_BASE + c`.
pub const CHAIN_STREAM_BASE: u64 = 1;

/// Generator keyed by `(master_seed, run, stream)`.
///
/// The first two fill the ChaCha key and the third picks the stream, so any
/// key or stream can be opened directly without touching the others.
pub fn keyed_rng(master_seed: u64, run: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&run.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

pub fn chain_rng(master_seed: u64, run: u64, chain: u64) -> ChaCha8Rng {
    keyed_rng(master_seed, run, CHAIN_STREAM_BASE + chain)
}
