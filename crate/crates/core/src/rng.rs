//! Counter-based noise. Every path owns a ChaCha8 stream keyed by the run seed
//! and indexed by the path number; each step consumes a fixed number of words,
//! so increments are a pure function of `(seed, path, step)`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Generator for stream `stream` of run `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer; used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn open_unit(bits: u64) -> f64 {
    // (0, 1]: never zero, so the logarithm below is finite.
    ((bits >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

/// Two independent standard normals from exactly two `u64` draws.
pub fn normal_pair<R: RngCore>(rng: &mut R) -> (f64, f64) {
    let u1 = open_unit(rng.next_u64());
    let u2 = open_unit(rng.next_u64());
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// Words (32-bit) consumed per step for `dim` normals.
pub fn words_per_step(dim: usize) -> u128 {
    (dim.div_ceil(2) * 4) as u128
}

/// Fills `out` with `dim` N(0, dt) draws for the next step.
pub fn fill_step<R: RngCore>(rng: &mut R, dt: f64, out: &mut [f64]) {
    let s = dt.sqrt();
    let mut i = 0;
    while i < out.len() {
        let (a, b) = normal_pair(rng);
        out[i] = s * a;
        if i + 1 < out.len() {
            out[i + 1] = s * b;
        }
        i += 2;
    }
}

/// Brownian increments `dW_k`, `k < n_steps`, row-major `n_steps x dim`.
pub fn brownian_increments(seed: u64, path: u64, n_steps: usize, dim: usize, dt: f64) -> Vec<f64> {
    let mut rng = stream_rng(seed, path);
    let mut out = vec![0.0; n_steps * dim];
    for chunk in out.chunks_mut(dim) {
        fill_step(&mut rng, dt, chunk);
    }
    out
}

/// Increment of step `step` alone, by seeking the stream.
pub fn increment_at(seed: u64, path: u64, step: usize, dim: usize, dt: f64) -> Vec<f64> {
    let mut rng = stream_rng(seed, path);
    rng.set_word_pos(step as u128 * words_per_step(dim));
    let mut out = vec![0.0; dim];
    fill_step(&mut rng, dt, &mut out);
    out
}

/// Sums consecutive blocks of `factor` increments: the coupled coarse noise.
pub fn coarsen(increments: &[f64], dim: usize, factor: usize) -> Vec<f64> {
    assert!(factor >= 1 && increments.len() % (dim * factor) == 0);
    increments
        .chunks(dim * factor)
        .flat_map(|block| {
            (0..dim).map(move |j| block.iter().skip(j).step_by(dim).sum::<f64>())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seek_matches_sequential() {
        let dt = 0.01;
        for dim in [1, 2, 3] {
            let all = brownian_increments(7, 3, 20, dim, dt);
            for step in [0, 1, 13, 19] {
                assert_eq!(increment_at(7, 3, step, dim, dt), all[step * dim..(step + 1) * dim]);
            }
        }
    }

    #[test]
    fn streams_differ() {
        assert_ne!(brownian_increments(1, 0, 4, 1, 1.0), brownian_increments(1, 1, 4, 1, 1.0));
        assert_ne!(brownian_increments(1, 0, 4, 1, 1.0), brownian_increments(2, 0, 4, 1, 1.0));
    }

    #[test]
    fn coarsen_sums_blocks() {
        let inc = vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0];
        assert_eq!(coarsen(&inc, 2, 2), vec![3.0, 30.0, 7.0, 70.0]);
        assert_eq!(coarsen(&inc, 2, 4), vec![10.0, 100.0]);
    }
}
