//! A numerical lab for the tail behavior of weighted loss distributions.
//!
//! Starting from a loss density `f` and the Gaussian weight function `g`
//! built on `f`'s (truncated) mean and deviation, this module computes the
//! normalization constant `C` of the weighted density `C·g·f`, truncated
//! exponential moments `∫₀^c e^{λx}·f` and `C·∫₀^c e^{λx}·g·f`, and the
//! closed-form constants `A`, `B`, `C''`, `C'` obtained by completing the
//! square in the exponent. The headline check, [`verify_theorem1`],
//! contrasts the diverging raw moments of a heavy-tailed `f` with the
//! converging moments of the weighted density, bounds the latter by `C'`,
//! and corroborates the verdicts with Hill tail-index estimates on raw and
//! resampled loss streams.

pub mod density;
pub mod quad;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use density::{Kde, LossDensity};
pub use quad::{LnQuadrature, QuadError, QuadOptions, Quadrature};

use crate::sampler::{
    AliasTable, GaussianWeightParams, LossStats, SamplerError, DEGENERATE_STD, WEIGHT_FLOOR,
};

/// Errors from tail analysis.
#[derive(Debug)]
pub enum TheoryError {
    /// A parameter violated its domain.
    InvalidParam { what: &'static str, value: f64 },
    /// A required spread collapsed to zero.
    Degenerate { what: &'static str },
    /// An integrand's mass is numerically zero (below 1e-300).
    VanishingMass { ln_mass: f64 },
    /// A log-integrand exceeded 700 while integrating in linear mode.
    Overflow { x: f64, ln_value: f64 },
    /// A sample was outside the operation's domain.
    Domain { what: &'static str, value: f64 },
    /// A density string could not be parsed.
    Parse(String),
    Quadrature(QuadError),
    Sampler(SamplerError),
}

impl fmt::Display for TheoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TheoryError::InvalidParam { what, value } => write!(f, "invalid {what}: {value}"),
            TheoryError::Degenerate { what } => write!(f, "degenerate {what}"),
            TheoryError::VanishingMass { ln_mass } => {
                write!(f, "integrand mass vanishes (ln mass {ln_mass})")
            }
            TheoryError::Overflow { x, ln_value } => {
                write!(
                    f,
                    "log-integrand {ln_value:.1} at x = {x} exceeds 700; use log-domain mode"
                )
            }
            TheoryError::Domain { what, value } => {
                write!(f, "{what} outside domain: {value}")
            }
            TheoryError::Parse(msg) => write!(f, "parse: {msg}"),
            TheoryError::Quadrature(err) => write!(f, "quadrature: {err}"),
            TheoryError::Sampler(err) => write!(f, "sampler: {err}"),
        }
    }
}

impl std::error::Error for TheoryError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TheoryError::Quadrature(err) => Some(err),
            TheoryError::Sampler(err) => Some(err),
            _ => None,
        }
    }
}

impl From<QuadError> for TheoryError {
    fn from(err: QuadError) -> Self {
        TheoryError::Quadrature(err)
    }
}

impl From<SamplerError> for TheoryError {
    fn from(err: SamplerError) -> Self {
        TheoryError::Sampler(err)
    }
}

type Result<T> = std::result::Result<T, TheoryError>;

/// The weight `g(x)` a sample at loss `x` receives: the Gaussian bump
/// evaluated at the z-score of `x` under `stats`.
pub fn gaussian_weight(
    x: f64,
    stats: &LossStats,
    params: &GaussianWeightParams,
) -> Result<f64> {
    Ok(ln_gaussian_weight(x, stats, params)?.exp())
}

/// Log of [`gaussian_weight`]; finite for every finite `x`.
pub fn ln_gaussian_weight(
    x: f64,
    stats: &LossStats,
    params: &GaussianWeightParams,
) -> Result<f64> {
    if stats.sigma_x < DEGENERATE_STD {
        return Err(TheoryError::Degenerate { what: "loss deviation" });
    }
    Ok(params.ln_density((x - stats.mu_x) / stats.sigma_x))
}

/// The normalization constant of the weighted density, with the
/// Proposition-style sanity flag.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Normalization {
    /// `C = 1 / ∫ g·f dx`.
    pub c: f64,
    /// The overlap integral `∫ g·f dx`.
    pub overlap: f64,
    /// Whether `C ≥ 1` held, as the Proposition requires; reported, not
    /// asserted, because tight bumps (`σ < 1/√(2π)`) can violate it.
    pub c_at_least_one: bool,
}

/// Computes `C = 1 / ∫ g(x)·f(x) dx` by adaptive quadrature over the
/// overlap of `f`'s mass and the weight bump.
pub fn normalization_constant(
    f: &LossDensity,
    stats: &LossStats,
    params: &GaussianWeightParams,
    opts: &QuadOptions,
) -> Result<Normalization> {
    if stats.sigma_x < DEGENERATE_STD {
        return Err(TheoryError::Degenerate { what: "loss deviation" });
    }
    let center = stats.mu_x + params.mu() * stats.sigma_x;
    let width = stats.sigma_x * params.sigma();
    let (f_lo, f_hi) = f.effective_range();
    let lo = f_lo.max(center - 45.0 * width);
    let hi = f_hi.min(center + 45.0 * width);
    if !(lo < hi) {
        return Err(TheoryError::VanishingMass { ln_mass: f64::NEG_INFINITY });
    }
    let overlap = quad::integrate(
        |x| (f.ln_pdf(x) + params.ln_density(stats.z(x))).exp(),
        lo,
        hi,
        opts,
    )?
    .value;
    if !(overlap >= 1e-300) {
        return Err(TheoryError::VanishingMass { ln_mass: overlap.max(0.0).ln() });
    }
    let c = 1.0 / overlap;
    Ok(Normalization { c, overlap, c_at_least_one: c >= 1.0 })
}

/// A truncated exponential moment, carried in both log and linear form
/// (the linear value may round to `inf`).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExpMoment {
    pub ln_value: f64,
    pub value: f64,
}

/// Computes `∫₀^cutoff e^{λx}·g(x)·f(x) dx` (or without `g` when `weight`
/// is `None`).
///
/// With `opts.log_domain` set the integral is accumulated in log space and
/// arbitrarily large exponents are fine; in linear mode any log-integrand
/// above 700 aborts with [`TheoryError::Overflow`].
pub fn exp_moment_truncated(
    f: &LossDensity,
    weight: Option<(&LossStats, &GaussianWeightParams)>,
    lambda: f64,
    cutoff: f64,
    opts: &QuadOptions,
) -> Result<ExpMoment> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(TheoryError::InvalidParam { what: "lambda", value: lambda });
    }
    if !cutoff.is_finite() || cutoff <= 0.0 {
        return Err(TheoryError::InvalidParam { what: "cutoff", value: cutoff });
    }
    if let Some((stats, _)) = weight {
        if stats.sigma_x < DEGENERATE_STD {
            return Err(TheoryError::Degenerate { what: "loss deviation" });
        }
    }
    let (f_lo, f_hi) = f.effective_range();
    let lo = f_lo.max(0.0);
    let hi = cutoff.min(f_hi);
    if !(lo < hi) {
        return Ok(ExpMoment { ln_value: f64::NEG_INFINITY, value: 0.0 });
    }
    let ln_integrand = |x: f64| {
        let mut v = lambda * x + f.ln_pdf(x);
        if let Some((stats, params)) = weight {
            v += params.ln_density(stats.z(x));
        }
        v
    };
    if opts.log_domain {
        let q = quad::integrate_ln(ln_integrand, lo, hi, opts)?;
        Ok(ExpMoment { ln_value: q.ln_value, value: q.ln_value.exp() })
    } else {
        let mut overflow: Option<(f64, f64)> = None;
        let result = quad::integrate(
            |x| {
                let ln_v = ln_integrand(x);
                if ln_v > 700.0 {
                    overflow = Some((x, ln_v));
                    return f64::NAN;
                }
                ln_v.exp()
            },
            lo,
            hi,
            opts,
        );
        if let Some((x, ln_value)) = overflow {
            return Err(TheoryError::Overflow { x, ln_value });
        }
        let value = result?.value.max(0.0);
        Ok(ExpMoment { ln_value: value.ln(), value })
    }
}

/// Constants from completing the square in `exp(−(y−μ)²/(2σ²) + 2λx)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ClosedFormConstants {
    /// Center of the completed Gaussian: `A = μ_x + μσ_x + 2σ_x²σ²λ`.
    pub a: f64,
    /// Width of the completed Gaussian: `B = σ_x·σ`.
    pub b: f64,
    /// Residual term `C'' = −A² + (μ_x + μσ_x)²`.
    pub c_dd: f64,
    /// `ln(C'/C) = ln σ_x − C''/(2σ_x²σ²)`.
    pub ln_cprime_over_c: f64,
}

/// Evaluates the closed-form constants for the weighted exponential moment.
pub fn closed_form_constants(
    params: &GaussianWeightParams,
    stats: &LossStats,
    lambda: f64,
) -> Result<ClosedFormConstants> {
    if !lambda.is_finite() {
        return Err(TheoryError::InvalidParam { what: "lambda", value: lambda });
    }
    if stats.sigma_x < DEGENERATE_STD {
        return Err(TheoryError::Degenerate { what: "loss deviation" });
    }
    let biased_mean = stats.mu_x + params.mu() * stats.sigma_x;
    let two_b_sq = 2.0 * stats.sigma_x * stats.sigma_x * params.sigma() * params.sigma();
    let a = biased_mean + two_b_sq * lambda;
    let c_dd = -a * a + biased_mean * biased_mean;
    Ok(ClosedFormConstants {
        a,
        b: stats.sigma_x * params.sigma(),
        c_dd,
        ln_cprime_over_c: stats.sigma_x.ln() - c_dd / two_b_sq,
    })
}

/// Heavy/light classification of a truncated-moment sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TailVerdict {
    Heavy,
    Light,
}

impl fmt::Display for TailVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TailVerdict::Heavy => write!(f, "heavy"),
            TailVerdict::Light => write!(f, "light"),
        }
    }
}

/// Knobs for [`verify_theorem1`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VerifySettings {
    pub quad: QuadOptions,
    /// Monte Carlo stream length for the Hill diagnostics.
    pub hill_samples: usize,
    /// Tail count `k` for the Hill estimator.
    pub hill_tail: usize,
    /// Seed for the sampling streams.
    pub seed: u64,
    /// Relative moment growth under cutoff doubling that still counts as
    /// converged.
    pub verdict_rel_change: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            quad: QuadOptions::default(),
            hill_samples: 100_000,
            hill_tail: 1000,
            seed: 7,
            verdict_rel_change: 1e-3,
        }
    }
}

/// Everything [`verify_theorem1`] measures.
///
/// `raw_moments[j] = ∫₀^{cutoffs[j]} e^{λx} f dx` and
/// `weighted_moments[j] = C·∫₀^{cutoffs[j]} e^{λx} g·f dx`; both lists are
/// also carried in log form because raw moments routinely overflow `f64`
/// (the linear field then serializes as JSON `null`). Weight stats are
/// frozen at the first cutoff's truncation so the weighted list can be
/// compared across cutoffs. Verdicts come from one extra cutoff doubling.
#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub density: String,
    pub lambda: f64,
    pub cutoffs: Vec<f64>,
    pub raw_moments: Vec<f64>,
    pub ln_raw_moments: Vec<f64>,
    pub weighted_moments: Vec<f64>,
    pub ln_weighted_moments: Vec<f64>,
    pub verdict_raw: TailVerdict,
    pub verdict_weighted: TailVerdict,
    pub hill_raw: f64,
    pub hill_weighted: f64,
    pub stats: LossStats,
    pub c: f64,
    pub c_prime: f64,
    /// Whether `f(x) ≤ e^{λx}` held on the integration range; the `C'`
    /// bound is only guaranteed when it does.
    pub precondition_holds: bool,
    /// Whether the last weighted moment was ≤ `C'`.
    pub bound_holds: bool,
}

/// Contrasts raw and Gaussian-weighted truncated exponential moments of
/// `f` and classifies both tails.
pub fn verify_theorem1(
    f: &LossDensity,
    params: &GaussianWeightParams,
    lambda: f64,
    cutoffs: &[f64],
    settings: &VerifySettings,
) -> Result<TailReport> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(TheoryError::InvalidParam { what: "lambda", value: lambda });
    }
    if cutoffs.is_empty() {
        return Err(TheoryError::InvalidParam { what: "cutoffs", value: 0.0 });
    }
    for pair in cutoffs.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(TheoryError::InvalidParam { what: "cutoffs", value: pair[1] });
        }
    }
    if !(cutoffs[0] > 0.0 && cutoffs[cutoffs.len() - 1].is_finite()) {
        return Err(TheoryError::InvalidParam { what: "cutoffs", value: cutoffs[0] });
    }

    let stats = f.truncated_stats(cutoffs[0], &settings.quad)?;
    let norm = normalization_constant(f, &stats, params, &settings.quad)?;
    let constants = closed_form_constants(params, &stats, lambda)?;
    let ln_c = norm.c.ln();
    let ln_c_prime = ln_c + constants.ln_cprime_over_c;

    let mut ln_raw = Vec::with_capacity(cutoffs.len());
    let mut ln_weighted = Vec::with_capacity(cutoffs.len());
    for &cutoff in cutoffs {
        ln_raw.push(exp_moment_truncated(f, None, lambda, cutoff, &settings.quad)?.ln_value);
        let m = exp_moment_truncated(f, Some((&stats, params)), lambda, cutoff, &settings.quad)?;
        ln_weighted.push(ln_c + m.ln_value);
    }

    let last = cutoffs[cutoffs.len() - 1];
    let doubled_raw = exp_moment_truncated(f, None, lambda, 2.0 * last, &settings.quad)?.ln_value;
    let doubled_weighted = ln_c
        + exp_moment_truncated(f, Some((&stats, params)), lambda, 2.0 * last, &settings.quad)?
            .ln_value;
    let verdict = |ln_last: f64, ln_next: f64| -> TailVerdict {
        if ln_last == f64::NEG_INFINITY && ln_next == f64::NEG_INFINITY {
            return TailVerdict::Light;
        }
        if ln_next - ln_last > settings.verdict_rel_change.ln_1p() {
            TailVerdict::Heavy
        } else {
            TailVerdict::Light
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let samples = f.sample_n(settings.hill_samples, &mut rng);
    let resampled = resample_losses(&samples, params, settings.hill_samples, &mut rng)?;
    let hill_raw = hill_positive(&samples, settings.hill_tail)?;
    let hill_weighted = hill_positive(&resampled, settings.hill_tail)?;

    let ln_weighted_last = ln_weighted[ln_weighted.len() - 1];
    Ok(TailReport {
        density: f.label(),
        lambda,
        cutoffs: cutoffs.to_vec(),
        raw_moments: ln_raw.iter().map(|v| v.exp()).collect(),
        ln_raw_moments: ln_raw.clone(),
        weighted_moments: ln_weighted.iter().map(|v| v.exp()).collect(),
        ln_weighted_moments: ln_weighted.clone(),
        verdict_raw: verdict(ln_raw[ln_raw.len() - 1], doubled_raw),
        verdict_weighted: verdict(ln_weighted_last, doubled_weighted),
        hill_raw,
        hill_weighted,
        stats,
        c: norm.c,
        c_prime: ln_c_prime.exp(),
        precondition_holds: density_below_exp(f, lambda, last),
        bound_holds: ln_weighted_last <= ln_c_prime + 1e-9,
    })
}

/// Checks `f(x) ≤ e^{λx}` on a grid over `[max(0, lo_f), hi]`.
fn density_below_exp(f: &LossDensity, lambda: f64, hi: f64) -> bool {
    let (f_lo, f_hi) = f.effective_range();
    let lo = f_lo.max(0.0);
    let hi = hi.min(f_hi);
    if !(lo < hi) {
        return true;
    }
    let n = 2048;
    (0..=n).all(|j| {
        let x = lo + (hi - lo) * j as f64 / n as f64;
        f.ln_pdf(x) <= lambda * x + 1e-12
    })
}

/// Hill estimator of the tail index inverse `1/α` from the top `k` order
/// statistics: `(1/k)·Σ ln(x_(n−i+1)/x_(n−k))`.
pub fn hill_estimator(samples: &[f64], k: usize) -> Result<f64> {
    let n = samples.len();
    if k < 2 || k >= n {
        return Err(TheoryError::InvalidParam { what: "tail count k", value: k as f64 });
    }
    for &x in samples {
        if !(x > 0.0) || !x.is_finite() {
            return Err(TheoryError::Domain { what: "hill sample", value: x });
        }
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let reference = sorted[k];
    let sum: f64 = sorted[..k].iter().map(|x| (x / reference).ln()).sum();
    Ok(sum / k as f64)
}

/// Percentile bootstrap confidence interval for [`hill_estimator`].
pub fn hill_bootstrap_ci<R: Rng + ?Sized>(
    samples: &[f64],
    k: usize,
    n_boot: usize,
    confidence: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(TheoryError::InvalidParam { what: "confidence", value: confidence });
    }
    if n_boot < 2 {
        return Err(TheoryError::InvalidParam { what: "bootstrap count", value: n_boot as f64 });
    }
    let n = samples.len();
    let mut estimates = Vec::with_capacity(n_boot);
    let mut resample = vec![0.0; n];
    for _ in 0..n_boot {
        for slot in resample.iter_mut() {
            *slot = samples[rng.random_range(0..n)];
        }
        estimates.push(hill_estimator(&resample, k)?);
    }
    estimates.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    let pick = |q: f64| {
        let idx = (q * (n_boot - 1) as f64).round() as usize;
        estimates[idx.min(n_boot - 1)]
    };
    Ok((pick(tail), pick(1.0 - tail)))
}

/// Resamples a loss stream under the Gaussian weighting: weights are built
/// from the stream's own stats, then `n_draws` losses are drawn with
/// replacement proportionally to them.
pub fn resample_losses<R: Rng + ?Sized>(
    losses: &[f64],
    params: &GaussianWeightParams,
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let stats = LossStats::from_losses(losses)?;
    let weights: Vec<f64> = losses
        .iter()
        .map(|&x| params.density(stats.z(x)).max(WEIGHT_FLOOR))
        .collect();
    let table = AliasTable::new(&weights)?;
    Ok((0..n_draws).map(|_| losses[table.sample(rng)]).collect())
}

/// Hill estimate over the positive part of a stream (tail diagnostics only
/// concern the right tail).
fn hill_positive(samples: &[f64], k: usize) -> Result<f64> {
    let positive: Vec<f64> = samples.iter().copied().filter(|&x| x > 0.0).collect();
    hill_estimator(&positive, k)
}
