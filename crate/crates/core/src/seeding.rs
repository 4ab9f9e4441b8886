//! Deterministic seed derivation. Every RNG in the simulator is a ChaCha
//! stream seeded through this mixer, so sequential and parallel client
//! execution see identical randomness.

/// Folds `tags` into `master` with a splitmix64 finalizer per tag.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut z = master;
    for &t in tags {
        z ^= t
            .wrapping_add(0x9E3779B97F4A7C15)
            .wrapping_add(z << 6)
            .wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
    }
    z
}

/// Tag namespaces for the independent streams of one experiment.
pub mod stream {
    pub const NET_INIT: u64 = 0x4E45;
    pub const DATA: u64 = 0xDA7A;
    pub const VALIDATION: u64 = 0x7A11;
    pub const EPOCH: u64 = 0xE0C4;
}
