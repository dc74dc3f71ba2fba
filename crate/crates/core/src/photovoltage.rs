//! Photon-to-voltage front end and the low-pass filtered voltage.
//!
//! The post-amplifier voltage is `V = b1 * log(K / b2 + 1) + b3 + sigma * Z`
//! with `K ~ Poisson(xi1 * L + xi2)`. For bright scenes `V` is close to
//! `N(mu_v, sigma_v^2)`, and after the one-pole filter the voltage is an OU
//! process with stationary variance `omega * sigma_v^2 / 2`.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Amplifier, noise and illumination constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontEndParams {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    /// Johnson noise standard deviation (V).
    pub sigma: f64,
    /// Radiance-to-electrons gain.
    pub xi1: f64,
    /// Dark-current electrons.
    pub xi2: f64,
    /// Scene radiance.
    pub radiance: f64,
}

impl FrontEndParams {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&'static str, f64, bool); 6] = [
            ("beta1", self.beta1, self.beta1 > 0.0),
            ("beta2", self.beta2, self.beta2 > 0.0),
            ("sigma", self.sigma, self.sigma >= 0.0),
            ("xi1", self.xi1, self.xi1 >= 0.0),
            ("xi2", self.xi2, self.xi2 >= 0.0),
            ("radiance", self.radiance, self.radiance >= 0.0),
        ];
        for (field, value, ok) in checks {
            if !value.is_finite() || !ok {
                return Err(Error::invalid(field, format!("out of range: {value}")));
            }
        }
        if !self.beta3.is_finite() {
            return Err(Error::invalid("beta3", "must be finite"));
        }
        if !(self.rate() > 0.0) {
            return Err(Error::invalid("radiance", "xi1 * radiance + xi2 must be positive"));
        }
        Ok(())
    }

    /// Poisson rate `xi1 * L + xi2` of collected electrons.
    pub fn rate(&self) -> f64 {
        self.xi1 * self.radiance + self.xi2
    }
}

/// Normal approximation of the post-amplifier voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianVoltage {
    pub mu_v: f64,
    pub sigma_v: f64,
}

/// Thresholds divided by `omega * sigma_v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedThresholds {
    pub theta_minus_tilde: f64,
    pub theta_plus_tilde: f64,
}

/// Rates below this use CDF inversion, above it rejection sampling.
const POISSON_INVERSION_LIMIT: f64 = 30.0;

/// Poisson sampler covering the whole range from dark to bright pixels.
#[derive(Debug, Clone, Copy)]
pub enum PhotonCount {
    Inversion { p0: f64, rate: f64 },
    Rejection(Poisson<f64>),
}

impl PhotonCount {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::invalid("rate", format!("must be positive and finite, got {rate}")));
        }
        if rate < POISSON_INVERSION_LIMIT {
            Ok(Self::Inversion { p0: (-rate).exp(), rate })
        } else {
            let p = Poisson::new(rate).map_err(|e| Error::invalid("rate", e.to_string()))?;
            Ok(Self::Rejection(p))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Inversion { p0, rate } => {
                let u: f64 = rng.gen();
                let mut k = 0u32;
                let mut pk = p0;
                let mut cdf = p0;
                while u >= cdf && pk > 0.0 {
                    k += 1;
                    pk *= rate / k as f64;
                    cdf += pk;
                }
                k as f64
            }
            Self::Rejection(p) => p.sample(rng),
        }
    }
}

/// One draw of the post-amplifier voltage.
pub fn sample_post_amp_voltage<R: Rng + ?Sized>(p: &FrontEndParams, rng: &mut R) -> Result<f64> {
    p.validate()?;
    let counts = PhotonCount::new(p.rate())?;
    Ok(draw_voltage(p, &counts, rng))
}

/// `n` independent draws of the post-amplifier voltage.
pub fn sample_post_amp_voltages<R: Rng + ?Sized>(p: &FrontEndParams, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    p.validate()?;
    let counts = PhotonCount::new(p.rate())?;
    Ok((0..n).map(|_| draw_voltage(p, &counts, rng)).collect())
}

fn draw_voltage<R: Rng + ?Sized>(p: &FrontEndParams, counts: &PhotonCount, rng: &mut R) -> f64 {
    let k = counts.sample(rng);
    let z: f64 = rng.sample(StandardNormal);
    p.beta1 * (k / p.beta2).ln_1p() + p.beta3 + p.sigma * z
}

/// Mean and standard deviation of the normal limit.
pub fn asymptotic_params(p: &FrontEndParams) -> Result<GaussianVoltage> {
    p.validate()?;
    let lam = p.rate();
    let mu_v = p.beta1 * (lam / p.beta2).ln_1p() + p.beta3;
    let shot = p.beta1 * lam.sqrt() / (lam + p.beta2);
    let var = shot * shot + p.sigma * p.sigma;
    Ok(GaussianVoltage { mu_v, sigma_v: var.sqrt() })
}

/// `theta / (omega * sigma_v)` for both thresholds.
pub fn normalize(g: &GaussianVoltage, omega: f64, theta_plus: f64, theta_minus: f64) -> Result<NormalizedThresholds> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::invalid("omega", "must be positive and finite"));
    }
    if !(g.sigma_v > 0.0 && g.sigma_v.is_finite()) {
        return Err(Error::invalid("sigma_v", "must be positive and finite"));
    }
    if !(theta_plus > 0.0 && theta_plus.is_finite()) {
        return Err(Error::invalid("theta_plus", "must be positive and finite"));
    }
    if !(theta_minus > 0.0 && theta_minus.is_finite()) {
        return Err(Error::invalid("theta_minus", "must be positive and finite"));
    }
    let scale = omega * g.sigma_v;
    Ok(NormalizedThresholds {
        theta_minus_tilde: theta_minus / scale,
        theta_plus_tilde: theta_plus / scale,
    })
}

/// Exact sampled path of `dX = -omega X dt + dW` on a uniform grid.
///
/// Returns `n_steps + 1` values starting with `x0`.
pub fn simulate_standard_ou_path<R: Rng + ?Sized>(omega: f64, x0: f64, dt: f64, n_steps: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::invalid("omega", "must be positive and finite"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", "must be positive and finite"));
    }
    let alpha = (-omega * dt).exp();
    let sd = (-(-2.0 * omega * dt).exp_m1() / (2.0 * omega)).sqrt();
    let mut path = Vec::with_capacity(n_steps + 1);
    let mut x = x0;
    path.push(x);
    for _ in 0..n_steps {
        let z: f64 = rng.sample(StandardNormal);
        x = alpha * x + sd * z;
        path.push(x);
    }
    Ok(path)
}

/// Filtered voltage path `V_{n+1} = alpha V_n + (1 - alpha) zeta_{n+1}`.
///
/// Generated as `mu_v + omega * sigma_v * X` with `X` from
/// [`simulate_standard_ou_path`], which has the same one-step law. With
/// `sigma_v = 0` the path is the noiseless relaxation and no randomness is
/// consumed.
pub fn simulate_ou_path<R: Rng + ?Sized>(
    mu_v: f64,
    sigma_v: f64,
    omega: f64,
    v0: f64,
    dt: f64,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(sigma_v >= 0.0 && sigma_v.is_finite()) {
        return Err(Error::invalid("sigma_v", "must be non-negative and finite"));
    }
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::invalid("omega", "must be positive and finite"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", "must be positive and finite"));
    }
    if sigma_v == 0.0 {
        return Ok((0..=n_steps)
            .map(|n| mu_v + (v0 - mu_v) * (-omega * n as f64 * dt).exp())
            .collect());
    }
    let scale = omega * sigma_v;
    let x = simulate_standard_ou_path(omega, (v0 - mu_v) / scale, dt, n_steps, rng)?;
    Ok(x.into_iter().map(|x| mu_v + scale * x).collect())
}
