//! Seeded random streams and the scalar samplers used by the Gibbs sweep.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta, Distribution, Exp1, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// A ChaCha stream addressed by `(seed, stream_id)`. Distinct stream ids give
/// independent streams from the same seed.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A new stream with the same seed and a different id.
    pub fn substream(&self, stream_id: u64) -> Self {
        RngStream::new(self.seed, stream_id)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// SplitMix64 finalizer; used to derive seeds for nested jobs.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Which half-line a truncated normal draw lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfLine {
    /// `(−∞, 0)`
    Below0,
    /// `(0, ∞)`
    Above0,
}

impl HalfLine {
    /// Side implied by a probit indicator.
    pub fn from_indicator(one: bool) -> Self {
        if one {
            HalfLine::Above0
        } else {
            HalfLine::Below0
        }
    }

    pub fn contains(self, x: f64) -> bool {
        match self {
            HalfLine::Above0 => x > 0.0,
            HalfLine::Below0 => x < 0.0,
        }
    }
}

/// Truncation point above which the exponential-rejection tail sampler is
/// used instead of the inverse CDF.
const TAIL_CUT: f64 = 4.0;

/// Upper-tail probability 1 − Φ(x), accurate far into the tail.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Φ(x).
pub fn normal_cdf(x: f64) -> f64 {
    normal_sf(-x)
}

/// log Φ(x), stable for very negative x.
pub fn normal_log_cdf(x: f64) -> f64 {
    if x > -30.0 {
        normal_cdf(x).ln()
    } else {
        // Mills ratio asymptotics.
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

/// Φ^{-1}(p) for p in (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    // Φ^{-1}(p) = −√2 erfc^{-1}(2p)
    -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}

/// Standard normal restricted to `(a, ∞)`.
fn std_normal_above<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    loop {
        let z = if a < 0.0 {
            // Acceptance probability ≥ 1/2.
            rng.sample::<f64, _>(StandardNormal)
        } else if a < TAIL_CUT {
            // Inverse CDF on the upper tail: z = Φ^{-1}(1 − u·(1 − Φ(a))).
            let u: f64 = rng.random();
            let tail = normal_sf(a);
            -normal_quantile((1.0 - u) * tail)
        } else {
            // Exponential rejection with the optimal rate.
            let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
            let e: f64 = rng.sample(Exp1);
            let z = a + e / lambda;
            let u: f64 = rng.random();
            if u.ln() > -0.5 * (z - lambda) * (z - lambda) {
                continue;
            }
            z
        };
        if z > a && z.is_finite() {
            return z;
        }
    }
}

/// Draw from `N(mean, sd²)` conditioned to `side`.
pub fn truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, side: HalfLine, rng: &mut R) -> f64 {
    debug_assert!(sd > 0.0);
    loop {
        let x = match side {
            HalfLine::Above0 => mean + sd * std_normal_above(-mean / sd, rng),
            HalfLine::Below0 => mean - sd * std_normal_above(mean / sd, rng),
        };
        if side.contains(x) {
            return x;
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive and finite, got {v}")))
    }
}

pub fn normal_draw<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> Result<f64> {
    positive("sd", sd)?;
    Ok(mean + sd * rng.sample::<f64, _>(StandardNormal))
}

/// Gamma with shape/rate parameterization.
pub fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    positive("shape", shape)?;
    positive("rate", rate)?;
    let dist = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Inverse gamma: `1/X` with `X ~ Gamma(shape, rate = scale)`.
pub fn inverse_gamma_draw<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    Ok(1.0 / gamma_draw(shape, scale, rng)?)
}

pub fn beta_draw<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    positive("a", a)?;
    positive("b", b)?;
    let dist = Beta::new(a, b).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Log densities used in Metropolis ratios.
pub mod logpdf {
    use statrs::function::gamma::ln_gamma;

    /// Gamma(shape, rate) at `x > 0`.
    pub fn gamma(x: f64, shape: f64, rate: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
    }

    /// Beta(a, b) at `x` in (0, 1).
    pub fn beta(x: f64, a: f64, b: f64) -> f64 {
        if x <= 0.0 || x >= 1.0 {
            return f64::NEG_INFINITY;
        }
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()
    }

    pub fn normal(x: f64, mean: f64, var: f64) -> f64 {
        -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean) * (x - mean) / var)
    }
}
