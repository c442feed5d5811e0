use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SimRng;
use crate::error::{Error, Result};

/// Target mean and standard deviation of a distribution bounded below by `min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
}

impl Moments {
    pub fn new(mean: f64, sd: f64, min: f64) -> Self {
        Moments { mean, sd, min }
    }
}

/// Normal distribution conditioned on `x ≥ min`, parameterised so that the
/// *truncated* distribution has the requested mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedNormal {
    mu: f64,
    sigma: f64,
    min: f64,
    /// Standardised lower bound `(min − mu) / sigma`.
    alpha: f64,
}

const ALPHA_LO: f64 = -38.0;
const ALPHA_HI: f64 = 30.0;

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Upper tail `P(Z > x)`.
fn upper_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Inverse Mills ratio.
fn mills(alpha: f64) -> f64 {
    phi(alpha) / upper_tail(alpha)
}

/// `(mean − min) / sd` of a standard normal truncated below at `alpha`.
fn shape_ratio(alpha: f64) -> f64 {
    let l = mills(alpha);
    (l - alpha) / (1.0 + alpha * l - l * l).sqrt()
}

impl TruncatedNormal {
    pub fn from_moments(m: Moments) -> Result<Self> {
        if !(m.sd >= 0.0 && m.mean.is_finite() && m.sd.is_finite() && m.min.is_finite()) {
            return Err(Error::input(format!("bad moments {m:?}")));
        }
        if m.mean < m.min {
            return Err(Error::input(format!(
                "mean {} below lower bound {}",
                m.mean, m.min
            )));
        }
        if m.sd == 0.0 {
            return Ok(TruncatedNormal {
                mu: m.mean,
                sigma: 0.0,
                min: m.min,
                alpha: f64::NEG_INFINITY,
            });
        }
        let target = (m.mean - m.min) / m.sd;
        // The ratio falls monotonically from ~|alpha| towards 1 (the exponential limit).
        if target <= 1.0 {
            return Err(Error::input(format!(
                "mean {} with sd {} is not reachable by a normal truncated at {}",
                m.mean, m.sd, m.min
            )));
        }
        let alpha = if target >= shape_ratio(ALPHA_LO) {
            ALPHA_LO
        } else if target <= shape_ratio(ALPHA_HI) {
            ALPHA_HI
        } else {
            let (mut lo, mut hi) = (ALPHA_LO, ALPHA_HI);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if shape_ratio(mid) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let sigma = (m.mean - m.min) / (mills(alpha) - alpha);
        Ok(TruncatedNormal {
            mu: m.min - alpha * sigma,
            sigma,
            min: m.min,
            alpha,
        })
    }

    /// Location and scale of the underlying (untruncated) normal.
    pub fn underlying(&self) -> (f64, f64) {
        (self.mu, self.sigma)
    }

    pub fn mean(&self) -> f64 {
        if self.sigma == 0.0 {
            return self.mu;
        }
        self.mu + self.sigma * mills(self.alpha)
    }

    pub fn sample(&self, rng: &mut SimRng) -> f64 {
        if self.sigma == 0.0 {
            return self.mu;
        }
        let z = if self.alpha <= 0.5 {
            loop {
                let z: f64 = StandardNormal.sample(rng);
                if z >= self.alpha {
                    break z;
                }
            }
        } else {
            // Exponential proposal for the far tail (Robert, 1995).
            let rate = 0.5 * (self.alpha + (self.alpha * self.alpha + 4.0).sqrt());
            loop {
                let e: f64 = Exp1.sample(rng);
                let z = self.alpha + e / rate;
                let u: f64 = rng.random();
                if u <= (-0.5 * (z - rate) * (z - rate)).exp() {
                    break z;
                }
            }
        };
        (self.mu + self.sigma * z).max(self.min)
    }
}
