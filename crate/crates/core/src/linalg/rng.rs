//! Seeded random streams.
//!
//! The bit source is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded through
//! `SeedableRng::seed_from_u64`. Every distribution on top of it is computed
//! here with a fixed, documented transform so that a stream is reproducible
//! from the seed alone:
//!
//! - uniform `[0, 1)`: `(next_u64 >> 11) * 2^-53`; open `(0, 1)` adds half an ulp
//!   step, `((next_u64 >> 11) + 0.5) * 2^-53`.
//! - integers in `[0, n)`: rejection sampling on `next_u64` against the
//!   largest multiple of `n`.
//! - shuffle: Fisher–Yates from the last index down.
//! - normal: Box–Muller, `sqrt(-2 ln u1) * cos(2π u2)` then the paired `sin`
//!   value is returned by the next call.
//! - Laplace: inverse CDF `-b * sign(u) * ln(1 - 2|u|)` with `u` uniform on
//!   `(-1/2, 1/2)`.
//! - gamma: Marsaglia–Tsang squeeze for shape ≥ 1; for shape < 1 the boost
//!   `Gamma(a) = Gamma(a + 1) * U^(1/a)`, carried in log space.
//! - Dirichlet: normalised gamma draws (log-sum-exp, so tiny concentrations
//!   do not underflow).
//!
//! Sub-streams are derived from a master seed and a tag path with SplitMix64
//! mixing, see [`derive_seed`].

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::Matrix;

const TWO_POW_MINUS_53: f64 = 1.0 / (1u64 << 53) as f64;

/// One logical random stream. Not `Clone`/`Sync` by intent: a stream has a
/// single owner.
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a tag path into a child seed: `s ← splitmix64(s ^ splitmix64(tag))`
/// for each tag in order.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |s, &t| splitmix64(s ^ splitmix64(t)))
}

/// Stream tags used across the simulator.
pub mod tags {
    pub const MODEL_INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const BUDGETS: u64 = 4;
    pub const CLIENT: u64 = 5;
    pub const DP: u64 = 6;
    pub const PARTICIPATION: u64 = 7;
    pub const SPLIT: u64 = 8;
}

/// Laplace(0, b) variate from a uniform `u` in `(-1/2, 1/2)`.
pub fn laplace_from_uniform(u: f64, scale: f64) -> f64 {
    if u == 0.0 {
        return 0.0;
    }
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn derive(master: u64, tags: &[u64]) -> Self {
        Rng::new(derive_seed(master, tags))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_MINUS_53
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * TWO_POW_MINUS_53
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * theta.sin());
        radius * theta.cos()
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Matrix of i.i.d. `N(0, std²)` entries in row-major order.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        assert!(std >= 0.0, "negative standard deviation");
        let data = (0..rows * cols)
            .map(|_| {
                let z = self.standard_normal();
                if std == 0.0 {
                    0.0
                } else {
                    std * z
                }
            })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("length matches shape")
    }

    /// Laplace(0, `scale`) variate, `scale > 0`.
    pub fn laplace(&mut self, scale: f64) -> f64 {
        debug_assert!(scale > 0.0);
        let u = self.uniform_open() - 0.5;
        laplace_from_uniform(u, scale)
    }

    /// Natural log of a Gamma(`shape`, 1) variate.
    pub fn ln_gamma_variate(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0, "gamma shape must be positive");
        if shape < 1.0 {
            let boosted = self.ln_gamma_variate(shape + 1.0);
            return boosted + self.uniform_open().ln() / shape;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform_open();
            if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return (d * v).ln();
            }
        }
    }

    /// Symmetric Dirichlet(`alpha`, …, `alpha`) over `k` categories.
    pub fn dirichlet(&mut self, alpha: f64, k: usize) -> Vec<f64> {
        let logs: Vec<f64> = (0..k).map(|_| self.ln_gamma_variate(alpha)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / total).collect()
    }

    /// Index drawn with probability proportional to `probs`.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let target = self.uniform() * total;
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if target < acc {
                return i;
            }
        }
        // Rounding can leave `target` just past the final partial sum.
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
    }
}
