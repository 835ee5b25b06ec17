//! Deterministic seed derivation. Every random stream in the crate is keyed
//! by a master seed plus a fixed sequence of stream indices (epoch, batch,
//! layer, trial, ...), so runs are reproducible and streams never collide by
//! accident.

/// SplitMix64 finalizer; good avalanche behavior for seed mixing.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a stream path into an independent child seed.
pub fn derive_seed(master: u64, stream: &[u64]) -> u64 {
    let mut z = splitmix64(master);
    for &s in stream {
        z = splitmix64(z ^ splitmix64(s.wrapping_add(0xa0761d6478bd642f)));
    }
    z
}
