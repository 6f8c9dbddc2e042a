use rand::distr::{Distribution, Open01};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Splittable random stream.
///
/// A stream is just a 64-bit key. [`RngStream::fork`] derives a child key
/// from the parent key and a label, so the draws a component sees depend only
/// on the labels along its path and never on how many numbers other
/// components consumed. Sampling goes through a ChaCha8 generator keyed by
/// the stream, which is itself counter-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    key: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { key: splitmix64(seed ^ 0x5442_5f52_4e47_0001) }
    }

    pub fn fork(&self, label: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(label.wrapping_add(0x9e37_79b9_7f4a_7c15))),
        }
    }

    /// Fork by a string label (hashed with FNV-1a).
    pub fn fork_str(&self, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
        }
        self.fork(h)
    }

    pub fn generator(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }

    /// `n` i.i.d. Gumbel(0, 1) draws.
    pub fn gumbel(&self, n: usize) -> Vec<f64> {
        let mut g = self.generator();
        (0..n)
            .map(|_| {
                let u: f64 = Open01.sample(&mut g);
                -(-u.ln()).ln()
            })
            .collect()
    }

    /// `n` i.i.d. standard normal draws.
    pub fn normals(&self, n: usize) -> Vec<f64> {
        StandardNormal.sample_iter(self.generator()).take(n).collect()
    }

    /// Uniform random permutation of `0..n`.
    pub fn permutation(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.generator());
        idx
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forks_are_independent_of_consumption_order() {
        let root = RngStream::new(7);
        let a1 = root.fork(1).normals(5);
        let _ = root.fork(2).normals(100);
        let a2 = root.fork(1).normals(5);
        assert_eq!(a1, a2);
        assert_ne!(root.fork(1).normals(5), root.fork(2).normals(5));
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = RngStream::new(3).permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn normal_moments() {
        let x = RngStream::new(11).normals(200_000);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02);
    }
}
