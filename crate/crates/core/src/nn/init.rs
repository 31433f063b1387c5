//! Seeded parameter initialization. Values are drawn in `f64` and cast, so
//! `f32` and `f64` models built from the same seed agree up to rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Scalar;

pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Scalar>(&mut self, n: usize, bound: f64) -> Vec<T> {
        (0..n).map(|_| T::c(self.rng.random_range(-bound..bound))).collect()
    }

    pub fn normal<T: Scalar>(&mut self, n: usize, std: f64) -> Vec<T> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::c(z * std)
            })
            .collect()
    }

    pub fn xavier_uniform<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Vec<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(fan_in * fan_out, bound)
    }

    /// He-uniform for layers followed by a rectifier.
    pub fn kaiming_uniform<T: Scalar>(&mut self, fan_in: usize, n: usize) -> Vec<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        self.uniform(n, bound)
    }
}

/// Fixed 2-D sine-cosine table of shape `(grid * grid, dim)`, used as the
/// starting value of the learned positional embeddings.
pub fn sincos_2d<T: Scalar>(grid: usize, dim: usize) -> Vec<T> {
    let quarter = dim / 4;
    let mut out = vec![T::zero(); grid * grid * dim];
    if quarter == 0 {
        return out;
    }
    for r in 0..grid {
        for c in 0..grid {
            let row = &mut out[(r * grid + c) * dim..(r * grid + c + 1) * dim];
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                row[i] = T::c((c as f64 * omega).sin());
                row[quarter + i] = T::c((c as f64 * omega).cos());
                row[2 * quarter + i] = T::c((r as f64 * omega).sin());
                row[3 * quarter + i] = T::c((r as f64 * omega).cos());
            }
        }
    }
    out
}
