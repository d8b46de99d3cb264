use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{masked_softmax, Scalar, Vector};
use crate::error::{param_err, Result};

/// Seeded random stream addressed by a label path.
///
/// Two streams with the same root seed and the same path always produce
/// the same draws; [`SimRng::split`] derives a child stream from the path,
/// not from how many values the parent has consumed.
#[derive(Debug, Clone)]
pub struct SimRng {
    seed: u64,
    path: Vec<String>,
    inner: ChaCha8Rng,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_stream_seed(seed: u64, path: &[String]) -> u64 {
    let mut h = FNV_OFFSET;
    for label in path {
        for b in label.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    splitmix64(seed ^ splitmix64(h))
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, Vec::new())
    }

    fn at(seed: u64, path: Vec<String>) -> Self {
        let inner = ChaCha8Rng::seed_from_u64(derive_stream_seed(seed, &path));
        Self { seed, path, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[String] {
        &self.path
    }

    /// Child stream at `path + [label]`.
    pub fn split(&self, label: impl Into<String>) -> Self {
        let mut path = self.path.clone();
        path.push(label.into());
        Self::at(self.seed, path)
    }

    pub fn split_indexed(&self, label: &str, index: usize) -> Self {
        self.split(format!("{label}#{index}"))
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`; `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for SimRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Draw from `N(mean, std²)`. `std == 0` returns `mean` without touching the stream.
pub fn gaussian<T: Scalar>(rng: &mut SimRng, mean: T, std: T) -> T {
    if std == T::zero() {
        return mean;
    }
    mean + std * T::of(rng.standard_normal())
}

/// Draw from the symmetric Dirichlet distribution `Dir(alpha, ..., alpha)` on `k` components.
///
/// Components are sampled in log space (`Gamma(α+1)·U^{1/α}` has law
/// `Gamma(α)`), so very small `alpha` does not underflow to an all-zero draw.
pub fn dirichlet_sample<T: Scalar>(rng: &mut SimRng, alpha: f64, k: usize) -> Result<Vector<T>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return param_err(format!("dirichlet concentration must be positive, got {alpha}"));
    }
    if k == 0 {
        return param_err("dirichlet needs at least one component");
    }
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("shape > 1 is valid");
    let logs: Vec<T> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(&mut rng.inner);
            // (0, 1] so the log is finite
            let u = 1.0 - rng.uniform();
            T::of(g.ln() + u.ln() / alpha)
        })
        .collect();
    masked_softmax(&Vector::from_vec(logs), &[])
}
