//! O(1) draws from a fixed discrete distribution (Vose's alias method).

use alloc::vec::Vec;
use rand_core::RngCore;

use crate::error::{Error, Result};

/// Uniform draw on `[0, 1)` with 53 random bits.
#[inline]
pub fn uniform01<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
#[inline]
pub fn uniform_index<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> usize {
    let n = n as u64;
    let threshold = n.wrapping_neg() % n;
    loop {
        let m = (rng.next_u64() as u128) * (n as u128);
        if (m as u64) >= threshold {
            return (m >> 64) as usize;
        }
    }
}

/// Alias table over the support of a probability vector. Zero-probability
/// entries are excluded up front, so they can never be drawn.
#[derive(Clone, Debug)]
pub struct AliasTable {
    support: Vec<usize>,
    cutoff: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let support: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        if support.is_empty() {
            return Err(Error::DegenerateProposal);
        }
        let total: f64 = support.iter().map(|&i| weights[i]).sum();
        if !total.is_finite() {
            return Err(Error::DegenerateProposal);
        }
        let n = support.len();
        let mut cutoff: Vec<f64> = support.iter().map(|&i| weights[i] * n as f64 / total).collect();
        let mut alias: Vec<u32> = (0..n as u32).collect();
        let mut small = Vec::new();
        let mut large = Vec::new();
        for (j, &c) in cutoff.iter().enumerate() {
            if c < 1.0 {
                small.push(j);
            } else {
                large.push(j);
            }
        }
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            alias[s] = l as u32;
            cutoff[l] -= 1.0 - cutoff[s];
            if cutoff[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // leftovers are 1 up to rounding
        for j in small.into_iter().chain(large) {
            cutoff[j] = 1.0;
        }
        Ok(Self { support, cutoff, alias })
    }

    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    #[inline]
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> usize {
        let j = uniform_index(rng, self.support.len());
        let k = if uniform01(rng) < self.cutoff[j] {
            j
        } else {
            self.alias[j] as usize
        };
        self.support[k]
    }
}
