//! Proportion estimates over finite populations.
//!
//! Failure logs are too numerous to inspect one by one, so a uniform random
//! sample is classified and the cause proportions are extrapolated to the
//! whole population with a normal-approximation interval and the finite
//! population correction `sqrt((N - n) / (N - 1))`.

use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile, as used in the usual survey tables.
pub const Z_95: f64 = 1.96;

/// Default target half-width of the interval (±10 percentage points).
pub const DEFAULT_HALF_WIDTH: f64 = 0.10;

/// Planning proportion that maximises `p(1 - p)`.
pub const PLANNING_P: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum StatsError {
    EmptyPopulation,
    EmptySample,
    SampleLargerThanPopulation { sample: u64, population: u64 },
    SuccessesExceedSample { successes: u64, sample: u64 },
    InvalidParameter(&'static str),
}

impl fmt::Display for StatsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StatsError::EmptyPopulation => write!(f, "population size must be at least 1"),
            StatsError::EmptySample => write!(f, "sample size must be at least 1"),
            StatsError::SampleLargerThanPopulation { sample, population } => {
                write!(f, "sample size {sample} exceeds population {population}")
            }
            StatsError::SuccessesExceedSample { successes, sample } => {
                write!(f, "{successes} successes out of a sample of {sample}")
            }
            StatsError::InvalidParameter(what) => write!(f, "invalid parameter: {what}"),
        }
    }
}

impl core::error::Error for StatsError {}

/// Estimate of a proportion `k / n` extrapolated to a population of `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionEstimate {
    pub successes: u64,
    pub sample: u64,
    pub population: u64,
    pub z: f64,
    pub p: f64,
    pub half_width: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ProportionEstimate {
    pub fn new(successes: u64, sample: u64, population: u64, z: f64) -> Result<Self, StatsError> {
        if sample == 0 {
            return Err(StatsError::EmptySample);
        }
        if successes > sample {
            return Err(StatsError::SuccessesExceedSample { successes, sample });
        }
        if sample > population {
            return Err(StatsError::SampleLargerThanPopulation { sample, population });
        }
        if !(z.is_finite() && z > 0.0) {
            return Err(StatsError::InvalidParameter("z must be positive"));
        }
        let p = successes as f64 / sample as f64;
        let half_width = z * standard_error(p, sample) * fpc(sample, population);
        Ok(ProportionEstimate {
            successes,
            sample,
            population,
            z,
            p,
            half_width,
            lower: (p - half_width).max(0.0),
            upper: (p + half_width).min(1.0),
        })
    }
}

/// `estimate_proportion(k, n, N, z)`.
pub fn estimate_proportion(
    successes: u64,
    sample: u64,
    population: u64,
    z: f64,
) -> Result<ProportionEstimate, StatsError> {
    ProportionEstimate::new(successes, sample, population, z)
}

fn standard_error(p: f64, n: u64) -> f64 {
    libm::sqrt(p * (1.0 - p) / n as f64)
}

/// Finite population correction. A census (`n == N`) has no sampling error;
/// `N == 1` forces `n == 1` and is treated the same way.
fn fpc(n: u64, population: u64) -> f64 {
    if population <= 1 {
        return 0.0;
    }
    libm::sqrt((population - n) as f64 / (population - 1) as f64)
}

/// Sample size required to estimate a proportion within `half_width` over a
/// population of `population` items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub population: u64,
    pub half_width: f64,
    pub z: f64,
    pub planning_p: f64,
    /// Infinite-population size `z² p₀ (1 - p₀) / e²`.
    pub n0: f64,
    pub n: u64,
}

impl SamplePlan {
    pub fn new(population: u64, half_width: f64, z: f64) -> Result<Self, StatsError> {
        if population == 0 {
            return Err(StatsError::EmptyPopulation);
        }
        if !(half_width.is_finite() && half_width > 0.0 && half_width < 1.0) {
            return Err(StatsError::InvalidParameter("half-width must lie in (0, 1)"));
        }
        if !(z.is_finite() && z > 0.0) {
            return Err(StatsError::InvalidParameter("z must be positive"));
        }
        let n0 = z * z * PLANNING_P * (1.0 - PLANNING_P) / (half_width * half_width);
        let corrected = n0 / (1.0 + (n0 - 1.0) / population as f64);
        // Round half up; f64::round is unavailable without std.
        let n = libm::floor(corrected + 0.5) as u64;
        Ok(SamplePlan {
            population,
            half_width,
            z,
            planning_p: PLANNING_P,
            n0,
            n: n.clamp(1, population),
        })
    }

    /// Uniform sample of `n` distinct indices in `0..population`, sorted.
    pub fn draw(&self, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<u64> =
            rand::seq::index::sample(&mut rng, self.population as usize, self.n as usize)
                .into_iter()
                .map(|i| i as u64)
                .collect();
        picked.sort_unstable();
        picked
    }
}

/// `plan_sample(N, e, z)`.
pub fn plan_sample(population: u64, half_width: f64, z: f64) -> Result<SamplePlan, StatsError> {
    SamplePlan::new(population, half_width, z)
}
