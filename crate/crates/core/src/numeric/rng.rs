use rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::Matrix;
use crate::error::{AsiError, Result};

/// Seeded generator used for every random draw in the crate.
///
/// The stream is fully specified so dumps can be reproduced elsewhere:
///
/// * state: xoshiro256** seeded from the `u64` seed through SplitMix64
///   (the reference `seed_from_u64` expansion);
/// * uniform: `(next_u64 >> 11) * 2^-53`, in `[0, 1)`;
/// * normal: Box-Muller on a fresh pair `(u1, u2)` with `u1 = 1 - uniform`,
///   yielding `sqrt(-2 ln u1) * cos(2 pi u2)` first and the matching `sin`
///   variate on the next call.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256StarStar,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256StarStar::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// `rows x cols` standard-normal draws, filled row-major.
pub fn randn_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(AsiError::shape("randn_matrix", format!("{rows}x{cols}"), "at least 1x1"));
    }
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::new(rows, cols, data)
}
