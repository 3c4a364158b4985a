use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The five non-identity orderings of a three-token window, indexed by the
/// value drawn from the generator.
pub const TRIPLE_PERMUTATIONS: [[usize; 3]; 5] =
    [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Permutes tokens inside disjoint consecutive triples.
///
/// Tokens are cut left to right into windows `[0,3), [3,6), ...`; a trailing
/// window shorter than three is left alone. For each full window one uniform
/// draw `u` in `[0, 1)` is taken from a ChaCha8 generator seeded with `seed`;
/// when `u < ratio` a second draw picks one of [`TRIPLE_PERMUTATIONS`]
/// uniformly and the window is reordered by it.
pub fn span_shuffle<T: Clone>(tokens: &[T], seed: u64, ratio: f64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = tokens.to_vec();
    for window in out.chunks_exact_mut(3) {
        let u: f64 = rng.random();
        if u < ratio {
            let perm = TRIPLE_PERMUTATIONS[rng.random_range(0..TRIPLE_PERMUTATIONS.len())];
            let original = [window[0].clone(), window[1].clone(), window[2].clone()];
            for (slot, &from) in window.iter_mut().zip(perm.iter()) {
                *slot = original[from].clone();
            }
        }
    }
    out
}

/// Whitespace-tokenizes `text`, shuffles, and rejoins with single spaces.
pub fn span_shuffle_text(text: &str, seed: u64, ratio: f64) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    span_shuffle(&tokens, seed, ratio).join(" ")
}
