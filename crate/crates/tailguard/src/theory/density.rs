//! Loss densities: analytic families and a KDE over observed losses.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, Pareto};

use super::quad::{self, QuadOptions};
use super::{Result, TheoryError};
use crate::sampler::{LossStats, DEGENERATE_STD};

const RANGE_SIGMAS: f64 = 45.0;
const TAIL_MASS: f64 = 1e-18;
const KDE_MAX_CENTERS: usize = 2048;

/// A model of the loss distribution `f(x)`.
#[derive(Debug, Clone)]
pub enum LossDensity {
    Gaussian { mean: f64, std: f64 },
    Pareto { scale: f64, shape: f64 },
    LogNormal { location: f64, scale: f64 },
    Empirical(Kde),
}

impl LossDensity {
    pub fn gaussian(mean: f64, std: f64) -> Result<Self> {
        require_finite("mean", mean)?;
        require_positive("std", std)?;
        Ok(LossDensity::Gaussian { mean, std })
    }

    pub fn pareto(scale: f64, shape: f64) -> Result<Self> {
        require_positive("scale", scale)?;
        require_positive("shape", shape)?;
        Ok(LossDensity::Pareto { scale, shape })
    }

    /// Log-normal with the given mean and deviation of `ln x`.
    pub fn lognormal(location: f64, scale: f64) -> Result<Self> {
        require_finite("location", location)?;
        require_positive("scale", scale)?;
        Ok(LossDensity::LogNormal { location, scale })
    }

    /// Kernel density over observed losses with Silverman's bandwidth.
    pub fn empirical(samples: Vec<f64>) -> Result<Self> {
        Ok(LossDensity::Empirical(Kde::new(samples, None)?))
    }

    pub fn empirical_with_bandwidth(samples: Vec<f64>, bandwidth: f64) -> Result<Self> {
        Ok(LossDensity::Empirical(Kde::new(samples, Some(bandwidth))?))
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    /// Natural log of the density; `-inf` outside the support.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        match self {
            LossDensity::Gaussian { mean, std } => {
                let z = (x - mean) / std;
                -0.5 * z * z - (std * SQRT_2PI).ln()
            }
            LossDensity::Pareto { scale, shape } => {
                if x < *scale {
                    f64::NEG_INFINITY
                } else {
                    shape.ln() + shape * scale.ln() - (shape + 1.0) * x.ln()
                }
            }
            LossDensity::LogNormal { location, scale } => {
                if x <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let z = (x.ln() - location) / scale;
                    -0.5 * z * z - (x * scale * SQRT_2PI).ln()
                }
            }
            LossDensity::Empirical(kde) => kde.ln_pdf(x),
        }
    }

    /// The interval holding all but a negligible sliver of mass; quadrature
    /// over the density is restricted to it.
    pub fn effective_range(&self) -> (f64, f64) {
        match self {
            LossDensity::Gaussian { mean, std } => {
                (mean - RANGE_SIGMAS * std, mean + RANGE_SIGMAS * std)
            }
            LossDensity::Pareto { scale, shape } => {
                let hi = scale * TAIL_MASS.powf(-1.0 / shape);
                (*scale, hi.min(1e300))
            }
            LossDensity::LogNormal { location, scale } => {
                let lo = (location - RANGE_SIGMAS * scale).exp();
                let hi = (location + RANGE_SIGMAS * scale).exp();
                (lo.max(1e-300), hi.min(1e300))
            }
            LossDensity::Empirical(kde) => kde.range(),
        }
    }

    /// Draws one value from the density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            LossDensity::Gaussian { mean, std } => {
                Normal::new(*mean, *std).expect("validated on construction").sample(rng)
            }
            LossDensity::Pareto { scale, shape } => {
                Pareto::new(*scale, *shape).expect("validated on construction").sample(rng)
            }
            LossDensity::LogNormal { location, scale } => {
                LogNormal::new(*location, *scale).expect("validated on construction").sample(rng)
            }
            LossDensity::Empirical(kde) => kde.sample(rng),
        }
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Mean and population deviation of the density truncated above at
    /// `upper`, computed by quadrature and normalized by the truncated mass.
    pub fn truncated_stats(&self, upper: f64, opts: &QuadOptions) -> Result<LossStats> {
        require_positive("upper", upper)?;
        let (lo, hi_eff) = self.effective_range();
        let hi = upper.min(hi_eff);
        if !(lo < hi) {
            return Err(TheoryError::VanishingMass { ln_mass: f64::NEG_INFINITY });
        }
        let mass = quad::integrate(|x| self.pdf(x), lo, hi, opts)?.value;
        if mass < 1e-300 {
            return Err(TheoryError::VanishingMass { ln_mass: mass.max(0.0).ln() });
        }
        let mean = quad::integrate(|x| x * self.pdf(x), lo, hi, opts)?.value / mass;
        let var =
            quad::integrate(|x| (x - mean) * (x - mean) * self.pdf(x), lo, hi, opts)?.value / mass;
        let sigma = var.max(0.0).sqrt();
        if sigma < DEGENERATE_STD {
            return Err(TheoryError::Degenerate { what: "truncated deviation" });
        }
        Ok(LossStats { mu_x: mean, sigma_x: sigma, n: 1 })
    }

    /// Short display form, e.g. `pareto(1,1.5)`.
    pub fn label(&self) -> String {
        match self {
            LossDensity::Gaussian { mean, std } => format!("gaussian({mean},{std})"),
            LossDensity::Pareto { scale, shape } => format!("pareto({scale},{shape})"),
            LossDensity::LogNormal { location, scale } => {
                format!("lognormal({location},{scale})")
            }
            LossDensity::Empirical(kde) => {
                format!("empirical(n={},h={:.4})", kde.samples().len(), kde.bandwidth())
            }
        }
    }
}

/// Parses `gaussian:MEAN,STD`, `pareto:SCALE,SHAPE`, or
/// `lognormal:LOCATION,SCALE`.
impl std::str::FromStr for LossDensity {
    type Err = TheoryError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| TheoryError::Parse(format!("missing ':' in density '{s}'")))?;
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 2 {
            return Err(TheoryError::Parse(format!(
                "density '{s}' needs exactly two parameters"
            )));
        }
        let mut nums = [0.0f64; 2];
        for (slot, part) in nums.iter_mut().zip(&parts) {
            *slot = part
                .trim()
                .parse()
                .map_err(|_| TheoryError::Parse(format!("bad number '{part}' in '{s}'")))?;
        }
        match kind {
            "gaussian" => LossDensity::gaussian(nums[0], nums[1]),
            "pareto" => LossDensity::pareto(nums[0], nums[1]),
            "lognormal" => LossDensity::lognormal(nums[0], nums[1]),
            other => Err(TheoryError::Parse(format!("unknown density kind '{other}'"))),
        }
    }
}

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Gaussian kernel density estimate.
///
/// Above 4096 samples the pdf is evaluated through 2048 equal-width bins
/// (mass-weighted centers); sampling always uses the raw samples.
#[derive(Debug, Clone)]
pub struct Kde {
    samples: Vec<f64>,
    bandwidth: f64,
    centers: Vec<(f64, f64)>,
}

impl Kde {
    fn new(samples: Vec<f64>, bandwidth: Option<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(TheoryError::InvalidParam {
                what: "empirical sample count",
                value: samples.len() as f64,
            });
        }
        for &x in &samples {
            if !x.is_finite() {
                return Err(TheoryError::InvalidParam { what: "empirical sample", value: x });
            }
        }
        let bandwidth = match bandwidth {
            Some(h) => {
                require_positive("bandwidth", h)?;
                h
            }
            None => silverman_bandwidth(&samples)?,
        };
        let centers = bin_centers(&samples);
        Ok(Kde { samples, bandwidth, centers })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    fn range(&self) -> (f64, f64) {
        let lo = self.samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo - 10.0 * self.bandwidth, hi + 10.0 * self.bandwidth)
    }

    fn ln_pdf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let mut max_term = f64::NEG_INFINITY;
        let terms: Vec<f64> = self
            .centers
            .iter()
            .map(|&(t, mass)| {
                let z = (x - t) / h;
                let term = mass.ln() - 0.5 * z * z;
                max_term = max_term.max(term);
                term
            })
            .collect();
        if max_term == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let sum: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
        max_term + sum.ln() - (h * SQRT_2PI).ln()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let base = self.samples[rng.random_range(0..self.samples.len())];
        let noise: f64 = rand_distr::StandardNormal.sample(rng);
        base + self.bandwidth * noise
    }
}

fn bin_centers(samples: &[f64]) -> Vec<(f64, f64)> {
    let n = samples.len();
    if n <= 2 * KDE_MAX_CENTERS {
        let mass = 1.0 / n as f64;
        return samples.iter().map(|&x| (x, mass)).collect();
    }
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return vec![(lo, 1.0)];
    }
    let width = (hi - lo) / KDE_MAX_CENTERS as f64;
    let mut counts = vec![0usize; KDE_MAX_CENTERS];
    for &x in samples {
        let bin = (((x - lo) / width) as usize).min(KDE_MAX_CENTERS - 1);
        counts[bin] += 1;
    }
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(j, &c)| (lo + width * (j as f64 + 0.5), c as f64 / n as f64))
        .collect()
}

fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let stats = LossStats::from_losses(samples)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { stats.sigma_x.min(iqr / 1.34) } else { stats.sigma_x };
    if spread <= 0.0 {
        return Err(TheoryError::Degenerate { what: "empirical sample spread" });
    }
    Ok(0.9 * spread * (samples.len() as f64).powf(-0.2))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = q * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn require_finite(what: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TheoryError::InvalidParam { what, value })
    }
}

fn require_positive(what: &'static str, value: f64) -> Result<()> {
    require_finite(what, value)?;
    if value > 0.0 {
        Ok(())
    } else {
        Err(TheoryError::InvalidParam { what, value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constructors_validate_parameters() {
        assert!(LossDensity::gaussian(0.0, 0.0).is_err());
        assert!(LossDensity::gaussian(f64::NAN, 1.0).is_err());
        assert!(LossDensity::pareto(-1.0, 1.5).is_err());
        assert!(LossDensity::pareto(1.0, 0.0).is_err());
        assert!(LossDensity::lognormal(0.0, -1.0).is_err());
        assert!(LossDensity::empirical(vec![1.0]).is_err());
        assert!(LossDensity::empirical(vec![1.0, f64::NAN]).is_err());
        assert!(LossDensity::empirical(vec![3.0, 3.0, 3.0]).is_err());
    }

    #[test]
    fn analytic_densities_integrate_to_one() {
        let opts = QuadOptions::default();
        for f in [
            LossDensity::gaussian(2.0, 3.0).unwrap(),
            LossDensity::pareto(1.0, 1.5).unwrap(),
            LossDensity::lognormal(0.0, 1.0).unwrap(),
        ] {
            let (lo, hi) = f.effective_range();
            let mass = quad::integrate(|x| f.pdf(x), lo, hi, &opts).unwrap().value;
            assert_relative_eq!(mass, 1.0, max_relative = 1e-8);
        }
    }

    #[test]
    fn pareto_pdf_matches_formula() {
        let f = LossDensity::pareto(1.0, 1.5).unwrap();
        assert_eq!(f.pdf(0.5), 0.0);
        assert_relative_eq!(f.pdf(1.0), 1.5, max_relative = 1e-12);
        assert_relative_eq!(f.pdf(4.0), 1.5 * 4.0f64.powf(-2.5), max_relative = 1e-12);
    }

    #[test]
    fn empirical_kde_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gauss = LossDensity::gaussian(1.0, 0.5).unwrap();
        let samples = gauss.sample_n(500, &mut rng);
        let f = LossDensity::empirical(samples).unwrap();
        let (lo, hi) = f.effective_range();
        let mass = quad::integrate(|x| f.pdf(x), lo, hi, &QuadOptions::default())
            .unwrap()
            .value;
        assert_relative_eq!(mass, 1.0, max_relative = 1e-8);
    }

    #[test]
    fn binned_kde_tracks_exact_kde() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gauss = LossDensity::gaussian(0.0, 1.0).unwrap();
        let samples = gauss.sample_n(20_000, &mut rng);
        let h = silverman_bandwidth(&samples).unwrap();
        let binned = Kde::new(samples.clone(), Some(h)).unwrap();
        assert!(binned.centers.len() <= KDE_MAX_CENTERS);
        let uniform_mass = 1.0 / samples.len() as f64;
        let exact = Kde {
            samples: samples.clone(),
            bandwidth: h,
            centers: samples.iter().map(|&x| (x, uniform_mass)).collect(),
        };
        for x in [-2.0, -0.5, 0.0, 0.7, 2.5] {
            assert_relative_eq!(binned.ln_pdf(x), exact.ln_pdf(x), epsilon = 1e-3);
        }
    }

    #[test]
    fn sampling_matches_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = LossDensity::gaussian(2.0, 3.0).unwrap();
        let samples = f.sample_n(200_000, &mut rng);
        let stats = LossStats::from_losses(&samples).unwrap();
        assert_relative_eq!(stats.mu_x, 2.0, epsilon = 0.05);
        assert_relative_eq!(stats.sigma_x, 3.0, epsilon = 0.05);

        let p = LossDensity::pareto(1.0, 3.0).unwrap();
        let samples = p.sample_n(200_000, &mut rng);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        assert_relative_eq!(mean, 1.5, epsilon = 0.02);
        assert!(samples.iter().all(|&x| x >= 1.0));
    }

    #[test]
    fn truncated_stats_match_closed_form_for_pareto() {
        let f = LossDensity::pareto(1.0, 1.5).unwrap();
        let stats = f.truncated_stats(100.0, &QuadOptions::default()).unwrap();
        assert_relative_eq!(stats.mu_x, 100.0 / 37.0, max_relative = 1e-9);
        assert_relative_eq!(stats.sigma_x, 4.440_993_709_501_347, max_relative = 1e-9);
    }

    #[test]
    fn truncated_stats_of_offset_gaussian_recover_its_moments() {
        let f = LossDensity::gaussian(5.0, 0.25).unwrap();
        let stats = f.truncated_stats(1e6, &QuadOptions::default()).unwrap();
        assert_relative_eq!(stats.mu_x, 5.0, max_relative = 1e-9);
        assert_relative_eq!(stats.sigma_x, 0.25, max_relative = 1e-8);
    }

    #[test]
    fn parse_round_trips() {
        let f: LossDensity = "pareto:1,1.5".parse().unwrap();
        assert_eq!(f.label(), "pareto(1,1.5)");
        let f: LossDensity = "gaussian:0,1".parse().unwrap();
        assert_eq!(f.label(), "gaussian(0,1)");
        let f: LossDensity = "lognormal: 0 , 1".parse().unwrap();
        assert_eq!(f.label(), "lognormal(0,1)");
        assert!("pareto:1".parse::<LossDensity>().is_err());
        assert!("pareto:1,x".parse::<LossDensity>().is_err());
        assert!("cauchy:0,1".parse::<LossDensity>().is_err());
        assert!("pareto".parse::<LossDensity>().is_err());
    }
}
