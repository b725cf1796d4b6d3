//! Adaptive Gauss-Kronrod quadrature, in linear or shifted-log form.
//!
//! [`integrate`] runs a 15-point Kronrod rule with global adaptive
//! bisection. [`integrate_ln`] integrates `exp(ln_f)` for integrands whose
//! values overflow `f64`: it scans for the peak of `ln_f`, factors the peak
//! out, integrates the shifted integrand linearly, and returns the log of
//! the result. Wide positive ranges are pre-split geometrically so narrow
//! features near the left end are not missed by the first coarse panels.

use std::collections::BinaryHeap;
use std::fmt;

/// Tolerances and budgets for adaptive integration.
///
/// `log_domain` selects the shifted-log path in operations that integrate
/// exponential-family integrands; [`integrate`] itself ignores it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct QuadOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_panels: u32,
    pub log_domain: bool,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions { rel_tol: 1e-9, abs_tol: 1e-10, max_panels: 4000, log_domain: true }
    }
}

/// Errors from adaptive integration.
#[derive(Debug)]
pub enum QuadError {
    /// Bounds were NaN, infinite, or reversed.
    InvalidBounds { lo: f64, hi: f64 },
    /// A tolerance was zero, negative, or NaN.
    InvalidTolerance { rel: f64, abs: f64 },
    /// The integrand returned NaN or ±inf.
    NonFiniteEvaluation { x: f64, value: f64 },
    /// The panel budget ran out before the error target was met.
    DidNotConverge { value: f64, abs_error: f64, panels: u32 },
    /// In log mode, the integrand rose more than 700 above the scanned
    /// peak, so the shifted integrand would overflow.
    ShiftedOverflow { x: f64, ln_excess: f64 },
}

impl fmt::Display for QuadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuadError::InvalidBounds { lo, hi } => {
                write!(f, "invalid integration bounds [{lo}, {hi}]")
            }
            QuadError::InvalidTolerance { rel, abs } => {
                write!(f, "invalid tolerances (rel {rel}, abs {abs})")
            }
            QuadError::NonFiniteEvaluation { x, value } => {
                write!(f, "integrand not finite at x = {x}: {value}")
            }
            QuadError::DidNotConverge { abs_error, panels, .. } => {
                write!(
                    f,
                    "quadrature did not converge: error {abs_error:.3e} after {panels} panels"
                )
            }
            QuadError::ShiftedOverflow { x, ln_excess } => {
                write!(
                    f,
                    "log-domain shift missed the peak: integrand at x = {x} is e^{ln_excess:.1} above it"
                )
            }
        }
    }
}

impl std::error::Error for QuadError {}

type Result<T> = std::result::Result<T, QuadError>;

/// An adaptive integral estimate.
#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub value: f64,
    pub abs_error: f64,
    pub panels: u32,
}

/// A log-domain integral estimate: the integral is `exp(ln_value)`.
#[derive(Debug, Clone, Copy)]
pub struct LnQuadrature {
    pub ln_value: f64,
    pub rel_error: f64,
    pub panels: u32,
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_838_258_730,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.000_000_000_000_000_000_000_000_000_000_000,
];

const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

const SEED_PANELS: usize = 32;
const SCAN_PER_PANEL: usize = 16;

/// QUADPACK's error rescaling: trust |K15 − G7| only to the extent the
/// integrand varies inside the panel.
fn rescale_error(err: f64, res_abs: f64, res_asc: f64) -> f64 {
    let mut scaled = err.abs();
    if res_asc != 0.0 && scaled != 0.0 {
        let scale = (200.0 * scaled / res_asc).powf(1.5);
        scaled = if scale < 1.0 { res_asc * scale } else { res_asc };
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        scaled = scaled.max(50.0 * f64::EPSILON * res_abs);
    }
    scaled
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    lo: f64,
    hi: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}

impl Eq for Panel {}

impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn qk15<F: FnMut(f64) -> f64>(f: &mut F, lo: f64, hi: f64) -> Result<Panel> {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);

    let mut eval = |x: f64| -> Result<f64> {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(QuadError::NonFiniteEvaluation { x, value: v })
        }
    };

    let f_center = eval(center)?;
    let mut res_gauss = f_center * WG[3];
    let mut res_kronrod = f_center * WGK[7];
    let mut res_abs = res_kronrod.abs();
    let mut values = [0.0f64; 15];
    values[7] = f_center;

    for j in 0..7 {
        let offset = half * XGK[j];
        let f_lo = eval(center - offset)?;
        let f_hi = eval(center + offset)?;
        values[j] = f_lo;
        values[14 - j] = f_hi;
        let sum = f_lo + f_hi;
        res_kronrod += WGK[j] * sum;
        res_abs += WGK[j] * (f_lo.abs() + f_hi.abs());
        if j % 2 == 1 {
            res_gauss += WG[j / 2] * sum;
        }
    }

    let mean = res_kronrod * 0.5;
    let mut res_asc = WGK[7] * (f_center - mean).abs();
    for j in 0..7 {
        res_asc += WGK[j] * ((values[j] - mean).abs() + (values[14 - j] - mean).abs());
    }

    let raw_err = (res_kronrod - res_gauss) * half;
    Ok(Panel {
        lo,
        hi,
        value: res_kronrod * half,
        error: rescale_error(raw_err, res_abs * half.abs(), res_asc * half.abs()),
    })
}

fn validate(lo: f64, hi: f64, opts: &QuadOptions) -> Result<()> {
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(QuadError::InvalidBounds { lo, hi });
    }
    let ok = |t: f64| t.is_finite() && t > 0.0;
    if !ok(opts.rel_tol) || !ok(opts.abs_tol) {
        return Err(QuadError::InvalidTolerance { rel: opts.rel_tol, abs: opts.abs_tol });
    }
    Ok(())
}

/// Seed boundaries: geometric when the range spans many decades of a
/// positive axis, uniform otherwise.
fn seed_boundaries(lo: f64, hi: f64) -> Vec<f64> {
    let mut bounds = Vec::with_capacity(SEED_PANELS + 1);
    if lo > 0.0 && hi / lo >= 1e3 {
        let ratio = (hi / lo).powf(1.0 / SEED_PANELS as f64);
        let mut x = lo;
        for _ in 0..SEED_PANELS {
            bounds.push(x);
            x *= ratio;
        }
    } else {
        let step = (hi - lo) / SEED_PANELS as f64;
        for j in 0..SEED_PANELS {
            bounds.push(lo + step * j as f64);
        }
    }
    bounds.push(hi);
    bounds
}

fn compensated_sum<I: Iterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn integrate_seeded<F: FnMut(f64) -> f64>(
    f: &mut F,
    boundaries: &[f64],
    opts: &QuadOptions,
) -> Result<Quadrature> {
    let mut heap = BinaryHeap::new();
    let mut done = Vec::new();
    let mut total = 0.0;
    let mut total_err = 0.0;
    let mut panels = 0u32;

    for pair in boundaries.windows(2) {
        let panel = qk15(f, pair[0], pair[1])?;
        total += panel.value;
        total_err += panel.error;
        panels += 1;
        heap.push(panel);
    }

    loop {
        if total_err <= opts.abs_tol.max(opts.rel_tol * total.abs()) {
            break;
        }
        let Some(worst) = heap.pop() else {
            break;
        };
        let mid = 0.5 * (worst.lo + worst.hi);
        if !(worst.lo < mid && mid < worst.hi) {
            done.push(worst);
            continue;
        }
        if panels >= opts.max_panels {
            heap.push(worst);
            let value = compensated_sum(
                heap.iter().chain(done.iter()).map(|p| p.value),
            );
            return Err(QuadError::DidNotConverge { value, abs_error: total_err, panels });
        }
        let left = qk15(f, worst.lo, mid)?;
        let right = qk15(f, mid, worst.hi)?;
        total += (left.value + right.value) - worst.value;
        total_err += (left.error + right.error) - worst.error;
        panels += 1;
        heap.push(left);
        heap.push(right);
    }

    let value = compensated_sum(heap.iter().chain(done.iter()).map(|p| p.value));
    let abs_error = heap.iter().chain(done.iter()).map(|p| p.error).sum();
    Ok(Quadrature { value, abs_error, panels })
}

/// Integrates `f` over `[lo, hi]` until the error estimate drops below
/// `max(abs_tol, rel_tol·|value|)`.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    opts: &QuadOptions,
) -> Result<Quadrature> {
    validate(lo, hi, opts)?;
    if lo == hi {
        return Ok(Quadrature { value: 0.0, abs_error: 0.0, panels: 0 });
    }
    integrate_seeded(&mut f, &seed_boundaries(lo, hi), opts)
}

/// Integrates `exp(ln_f)` over `[lo, hi]` and returns the log of the
/// integral, never materializing values beyond `f64` range.
///
/// `ln_f` may return `-inf` where the integrand vanishes. The convergence
/// test applies `rel_tol` to the integral and `abs_tol` to the
/// peak-shifted integrand.
pub fn integrate_ln<F: FnMut(f64) -> f64>(
    mut ln_f: F,
    lo: f64,
    hi: f64,
    opts: &QuadOptions,
) -> Result<LnQuadrature> {
    validate(lo, hi, opts)?;
    if lo == hi {
        return Ok(LnQuadrature { ln_value: f64::NEG_INFINITY, rel_error: 0.0, panels: 0 });
    }

    let boundaries = seed_boundaries(lo, hi);
    let mut shift = f64::NEG_INFINITY;
    for pair in boundaries.windows(2) {
        let step = (pair[1] - pair[0]) / SCAN_PER_PANEL as f64;
        for j in 0..=SCAN_PER_PANEL {
            let x = pair[0] + step * j as f64;
            let v = ln_f(x);
            if v.is_nan() || v == f64::INFINITY {
                return Err(QuadError::NonFiniteEvaluation { x, value: v });
            }
            shift = shift.max(v);
        }
    }
    if shift == f64::NEG_INFINITY {
        return Ok(LnQuadrature { ln_value: f64::NEG_INFINITY, rel_error: 0.0, panels: 0 });
    }

    let mut overflow: Option<(f64, f64)> = None;
    let result = {
        let mut shifted = |x: f64| {
            let excess = ln_f(x) - shift;
            if excess > 700.0 {
                overflow = Some((x, excess));
                return f64::NAN;
            }
            excess.exp()
        };
        integrate_seeded(&mut shifted, &boundaries, opts)
    };
    if let Some((x, ln_excess)) = overflow {
        return Err(QuadError::ShiftedOverflow { x, ln_excess });
    }
    let result = result?;
    let value = result.value.max(0.0);
    Ok(LnQuadrature {
        ln_value: shift + value.ln(),
        rel_error: result.abs_error / value.max(f64::MIN_POSITIVE),
        panels: result.panels,
    })
}
