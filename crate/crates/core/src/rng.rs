//! Seed derivation and categorical sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for `(stream, index)` under a base seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

pub fn rng_for(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

/// Inverse-CDF draw from a (possibly unnormalized) probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Sample from log probabilities.
pub fn sample_log_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let probs: Vec<f64> = log_probs.iter().map(|x| x.exp()).collect();
    sample_categorical(&probs, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_by_stream_and_index() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(9, 2, 3), derive_seed(9, 2, 3));
    }

    #[test]
    fn categorical_frequencies() {
        let mut rng = rng_for(3, 0, 0);
        let p = [0.2, 0.0, 0.5, 0.3];
        let mut counts = [0usize; 4];
        for _ in 0..20_000 {
            counts[sample_categorical(&p, &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        for i in [0, 2, 3] {
            assert!((counts[i] as f64 / 20_000.0 - p[i]).abs() < 0.015);
        }
    }
}
