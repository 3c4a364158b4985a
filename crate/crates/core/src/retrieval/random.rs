use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::Candidate;
use crate::num::Scalar;

/// Samples `n` ids without replacement.
///
/// Ids are sorted first so the result does not depend on pool storage
/// order. Then a partial Fisher-Yates pass runs on a ChaCha8 generator seeded
/// with `seed`: for `i in 0..min(n, len)`, draw `j` uniformly from `i..len`
/// and swap positions `i` and `j`. The first `min(n, len)` ids are returned
/// with score zero.
pub fn random_sample<F: Scalar>(pool: &[&str], n: usize, seed: u64) -> Vec<Candidate<F>> {
    let mut ids: Vec<&str> = pool.to_vec();
    ids.sort_unstable();
    let m = n.min(ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..m {
        let j = rng.random_range(i..ids.len());
        ids.swap(i, j);
    }
    ids.into_iter()
        .take(m)
        .enumerate()
        .map(|(rank, id)| Candidate {
            id: id.to_string(),
            score: F::zero(),
            rank,
        })
        .collect()
}

/// Mixes a run seed with a tag (typically an example id) into a new seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
