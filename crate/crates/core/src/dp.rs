//! Noise primitives over deterministic seeded streams.
//!
//! # Mechanisms
//!
//! - **Laplace**: `f(D) + Lap(Δf/ε)` satisfies (ε, 0)-DP.
//! - **Gaussian**: `f(D) + N(0, σ²)` with `σ = √(2 ln(1.25/δ))·Δ₂/ε`
//!   satisfies (ε, δ)-DP for ε, δ ∈ (0, 1).
//! - **Smooth-sensitivity Laplace**: `f(D) + (2 S*/ε)·Lap(1)` satisfies
//!   (ε, δ)-DP whenever the smoothing parameter obeys
//!   `β ≤ ε / (2 ln(2/δ))`.
//! - **Unbiased smooth-sensitivity release**: the log of a β-smooth
//!   sensitivity has global sensitivity β, so
//!   `exp(ln S* + z − σ²/2)` with Gaussian `z` is a (ε, δ)-DP release
//!   whose mean is exactly `S*`.
//!
//! # Determinism
//!
//! Sampling is fully specified so replays match bit for bit: streams are
//! ChaCha12 keyed by `(seed, site, repetition, mechanism tag)`, uniforms
//! are `(u64 >> 11 + 0.5) · 2⁻⁵³` (open interval), Laplace draws use the
//! inverse CDF of a single uniform, and normal draws use the Box-Muller
//! transform of exactly two uniforms. Transcendentals go through `libm`
//! so outputs do not depend on the platform's libm.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Labels the sub-query a stream feeds, so that every mechanism invoked
/// under one site's budget split draws from an independent stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum MechanismTag {
    DataGen = 1,
    SiteSplit = 2,
    AteTreatedSum = 3,
    AteControlSum = 4,
    VarTreatedSumSq = 5,
    VarControlSumSq = 6,
    MatchingAte = 7,
    SamplingVariance = 8,
    SensitivityRelease = 9,
}

/// Deterministic uniform/normal source keyed by `(seed, site,
/// repetition, mechanism tag)`. Identical keys replay identical
/// sequences; distinct keys give independent streams.
#[derive(Debug, Clone)]
pub struct RandomStream {
    kind: StreamKind,
}

#[derive(Debug, Clone)]
enum StreamKind {
    Keyed(ChaCha12Rng),
    /// Every uniform is 1/2 and every normal is 0, so all mechanism
    /// outputs collapse to their zero-noise values. For calibration
    /// tests only; never use for an actual release.
    Degenerate,
}

impl RandomStream {
    pub fn keyed(seed: u64, site: u32, repetition: u32, tag: MechanismTag) -> Self {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&seed.to_le_bytes());
        key[8..12].copy_from_slice(&site.to_le_bytes());
        key[12..16].copy_from_slice(&repetition.to_le_bytes());
        key[16..18].copy_from_slice(&(tag as u16).to_le_bytes());
        key[18..32].copy_from_slice(b"fedate-stream\0");
        Self { kind: StreamKind::Keyed(ChaCha12Rng::from_seed(key)) }
    }

    pub fn degenerate() -> Self {
        Self { kind: StreamKind::Degenerate }
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn uniform_open01(&mut self) -> f64 {
        match &mut self.kind {
            StreamKind::Keyed(rng) => ((rng.next_u64() >> 11) as f64 + 0.5) * 2f64.powi(-53),
            StreamKind::Degenerate => 0.5,
        }
    }

    /// Standard normal via Box-Muller on exactly two uniforms.
    pub fn standard_normal(&mut self) -> f64 {
        match &mut self.kind {
            StreamKind::Keyed(_) => {
                let u1 = self.uniform_open01();
                let u2 = self.uniform_open01();
                libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
            }
            StreamKind::Degenerate => 0.0,
        }
    }

    /// Unbiased integer draw from `0..n` by rejection.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        match &mut self.kind {
            StreamKind::Keyed(rng) => {
                let zone = u64::MAX - (u64::MAX % n);
                loop {
                    let v = rng.next_u64();
                    if v < zone {
                        return v % n;
                    }
                }
            }
            StreamKind::Degenerate => 0,
        }
    }
}

/// Factory for the per-mechanism streams of one `(site, repetition)`
/// pipeline run.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSource {
    seed: u64,
    site: u32,
    repetition: u32,
    degenerate: bool,
}

impl NoiseSource {
    pub fn keyed(seed: u64, site: u32, repetition: u32) -> Self {
        Self { seed, site, repetition, degenerate: false }
    }

    /// All streams produce zero noise. For calibration tests only.
    pub fn degenerate() -> Self {
        Self { seed: 0, site: 0, repetition: 0, degenerate: true }
    }

    pub fn stream(&self, tag: MechanismTag) -> RandomStream {
        if self.degenerate {
            RandomStream::degenerate()
        } else {
            RandomStream::keyed(self.seed, self.site, self.repetition, tag)
        }
    }
}

/// A β-smooth sensitivity value together with its smoothing parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothSensitivityValue {
    value: f64,
    beta: f64,
}

impl SmoothSensitivityValue {
    pub fn new(value: f64, beta: f64) -> Self {
        assert!(value > 0.0 && value.is_finite(), "smooth sensitivity must be positive, got {value}");
        assert!(beta > 0.0 && beta.is_finite(), "beta must be positive, got {beta}");
        Self { value, beta }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Inverse CDF of the centered Laplace distribution; this is the fixed
/// transform used for every Laplace draw. `u = 1/2` maps to 0.
pub fn laplace_inverse_cdf(u: f64, scale: f64) -> f64 {
    let d = u - 0.5;
    -scale * d.signum() * libm::log(1.0 - 2.0 * d.abs())
}

/// One draw from Laplace(0, scale).
pub fn sample_laplace(scale: f64, rng: &mut RandomStream) -> Result<f64> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::NonPositiveScale(scale));
    }
    Ok(laplace_inverse_cdf(rng.uniform_open01(), scale))
}

/// Laplace mechanism: `value + Lap(Δ/ε)`, satisfying (ε, 0)-DP.
pub fn laplace_mechanism(
    value: f64,
    global_sensitivity: f64,
    epsilon: f64,
    rng: &mut RandomStream,
) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::NonPositiveEpsilon(epsilon));
    }
    if !(global_sensitivity > 0.0) || !global_sensitivity.is_finite() {
        return Err(Error::NonPositiveScale(global_sensitivity));
    }
    Ok(value + sample_laplace(global_sensitivity / epsilon, rng)?)
}

/// Noise level of the (ε, δ) Gaussian mechanism for a given L2
/// sensitivity: `σ = √(2 ln(1.25/δ))·Δ₂/ε`. Requires ε, δ ∈ (0, 1),
/// the range covered by the analytic calibration.
pub fn gaussian_sigma(l2_sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidEpsilonDelta { eps: epsilon, delta });
    }
    Ok(libm::sqrt(2.0 * libm::log(1.25 / delta)) * l2_sensitivity / epsilon)
}

/// Gaussian mechanism: `value + N(0, σ²)`, satisfying (ε, δ)-DP.
pub fn gaussian_mechanism(
    value: f64,
    l2_sensitivity: f64,
    epsilon: f64,
    delta: f64,
    rng: &mut RandomStream,
) -> Result<f64> {
    if !(l2_sensitivity > 0.0) || !l2_sensitivity.is_finite() {
        return Err(Error::NonPositiveScale(l2_sensitivity));
    }
    let sigma = gaussian_sigma(l2_sensitivity, epsilon, delta)?;
    Ok(value + sigma * rng.standard_normal())
}

/// Largest admissible smoothing parameter for the smooth-sensitivity
/// Laplace mechanism: `β = ε / (2 ln(2/δ))`.
pub fn beta_for(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::NonPositiveEpsilon(epsilon));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidDelta(delta));
    }
    Ok(epsilon / (2.0 * libm::log(2.0 / delta)))
}

/// Smooth-sensitivity Laplace mechanism: `value + (2 S*/ε)·Lap(1)`.
/// Rejects smoothing parameters above the admissible `β = ε/(2 ln(2/δ))`.
pub fn smooth_laplace_mechanism(
    value: f64,
    s: &SmoothSensitivityValue,
    epsilon: f64,
    delta: f64,
    rng: &mut RandomStream,
) -> Result<f64> {
    let max_beta = beta_for(epsilon, delta)?;
    if s.beta() > max_beta * (1.0 + 1e-12) {
        return Err(Error::BetaTooLarge { beta: s.beta(), max_beta });
    }
    Ok(value + (2.0 * s.value() / epsilon) * sample_laplace(1.0, rng)?)
}

/// Unbiased (ε, δ)-DP release of a β-smooth sensitivity.
///
/// `ln S*` has global sensitivity β, so a Gaussian release of the log
/// with a half-variance correction gives `exp(ln S* + z − σ²/2)` whose
/// mean over `z ~ N(0, σ²)` is exactly `S*`. The output is strictly
/// positive.
pub fn release_smooth_sensitivity(
    s: &SmoothSensitivityValue,
    epsilon: f64,
    delta: f64,
    rng: &mut RandomStream,
) -> Result<f64> {
    let sigma = gaussian_sigma(s.beta(), epsilon, delta)?;
    let z = sigma * rng.standard_normal();
    Ok(libm::exp(libm::log(s.value()) + z - sigma * sigma / 2.0))
}
