//! Deterministic sampling.
//!
//! Every random quantity in the crate comes from a ChaCha8 stream keyed by a
//! master seed plus three context tags packed little-endian into the 32-byte
//! ChaCha key. Substreams for different replicates, scenarios, or purposes
//! are therefore independent by construction and do not depend on worker
//! scheduling. Uniform, normal, and index draws are derived here from raw
//! generator words rather than through distribution adapters, so the exact
//! sampled sequences are pinned by this crate alone.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A ChaCha8 stream for (seed, tags). Equal inputs give equal streams on
/// every platform.
pub fn substream(seed: u64, tags: [u64; 3]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tags[0].to_le_bytes());
    key[16..24].copy_from_slice(&tags[1].to_le_bytes());
    key[24..32].copy_from_slice(&tags[2].to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Uniform on [0, 1): the top 53 bits of one generator word.
pub fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform on [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

/// Standard normal via Box-Muller; consumes exactly two generator words per
/// draw so stream positions stay predictable.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - uniform01(rng); // in (0, 1], keeps the log finite
    let u2 = uniform01(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform index in 0..n by rejection, unbiased for every n.
pub fn index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0, "index draw from an empty range");
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let mut a = substream(7, [1, 2, 3]);
        let mut b = substream(7, [1, 2, 3]);
        let mut c = substream(7, [1, 2, 4]);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut rng = substream(1, [0, 0, 0]);
        for _ in 0..10_000 {
            let v = uniform01(&mut rng);
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = substream(2, [0, 0, 0]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        // 5 sigma bands around the exact moments at this sample size.
        assert!(mean.abs() < 5.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn index_covers_the_range_uniformly() {
        let mut rng = substream(3, [0, 0, 0]);
        let mut counts = [0usize; 7];
        let n = 70_000;
        for _ in 0..n {
            counts[index(&mut rng, 7)] += 1;
        }
        for &c in &counts {
            let expect = n as f64 / 7.0;
            assert!((c as f64 - expect).abs() < 5.0 * expect.sqrt());
        }
    }
}
