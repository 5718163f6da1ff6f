//! Deterministic random streams.
//!
//! Every run owns one seed. Subsystems draw from named child streams so
//! that adding draws in one place never shifts the numbers seen by another.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Identifies the generator and stream-derivation scheme; bump on any change.
pub const GENERATOR: &str = "chacha8/fnv1a-stream/v1";

pub type StreamRng = ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// The named child stream of `seed`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Instance `index` of a named stream; used to fan out independent instances.
pub fn instance(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)));
    rng.set_stream(fnv1a(name));
    rng
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    // Column-major fill order is part of the reproducibility contract.
    DMatrix::from_fn(rows, cols, |_, _| std * gaussian(rng))
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian with sign correction).
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, k: usize) -> DMatrix<f64> {
    random_orthonormal_columns(rng, k, k)
}

/// `n × m` matrix with orthonormal columns, `m <= n`.
pub fn random_orthonormal_columns<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> DMatrix<f64> {
    assert!(m <= n);
    let g = gaussian_matrix(rng, n, m, 1.0);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
