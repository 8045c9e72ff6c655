use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::mat::{norm, Mat, Vector};
use crate::error::{Error, Result};

/// Counter-based random stream.
///
/// A stream is identified by `(seed, stream)`. Independent shards derive
/// their own stream with [`Rng::fork`] or [`Rng::keyed`], so results do not
/// depend on how work is scheduled across threads.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Stream for `seed` addressed by a path of integer keys, e.g.
    /// `(run seed, sample index)`.
    pub fn keyed(seed: u64, keys: &[u64]) -> Self {
        let stream = keys.iter().fold(0x5EED_u64, |acc, &k| splitmix(acc ^ splitmix(k)));
        Self::with_stream(seed, stream)
    }

    /// Child stream; does not advance `self`.
    pub fn fork(&self, key: u64) -> Self {
        Self::with_stream(self.seed, splitmix(self.stream ^ splitmix(key.wrapping_add(1))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn gaussian_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.gaussian()).collect()
    }

    pub fn gaussian_mat(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        Mat::from_raw(rows, cols, self.gaussian_vec(rows * cols, std))
    }

    /// Writes a uniform draw from `S^{d-1}` into `out`.
    pub(crate) fn fill_sphere(&mut self, out: &mut [f64]) {
        loop {
            for x in out.iter_mut() {
                *x = self.gaussian();
            }
            let n = norm(out);
            if n > 1e-300 {
                out.iter_mut().for_each(|x| *x /= n);
                return;
            }
        }
    }
}

/// Uniform sample from the unit sphere `S^{d-1}` (normalized standard
/// Gaussian).
pub fn sphere_uniform(rng: &mut Rng, d: usize) -> Result<Vector> {
    if d < 2 {
        return Err(Error::InvalidDimension(format!("sphere dimension must be >= 2, got {d}")));
    }
    let mut v = vec![0.0; d];
    rng.fill_sphere(&mut v);
    Ok(Vector::from_raw(v))
}
