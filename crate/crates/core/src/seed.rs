//! Reproducible stream derivation.

/// One round of the splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a parent seed with a child index into an independent-looking child seed.
pub fn derive(parent: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Seed of round `round` of a run.
pub fn round_seed(run_seed: u64, round: u64) -> u64 {
    derive(run_seed, round)
}

/// Seed of episode `episode` within a round stream.
pub fn episode_seed(round_seed: u64, episode: u64) -> u64 {
    derive(round_seed, episode)
}
