//! Deterministic random streams.
//!
//! Every consumer derives its own ChaCha stream from a base seed plus a path
//! of integers (instance index, epoch, batch, purpose tag), so results never
//! depend on the order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Matrix;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

pub fn normal_matrix<R: rand::Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Purpose tags for [`stream`] paths.
pub mod tag {
    pub const MECHANISM: u64 = 1;
    pub const INSTANCE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const STEP: u64 = 5;
}
