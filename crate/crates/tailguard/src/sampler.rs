//! Per-sample weights from running losses, and weighted index drawing.
//!
//! The sampler keeps one weight per training sample, all initialized to 1.
//! At each epoch boundary the recorded losses are z-normalized and pushed
//! through a Gaussian bump ([`SamplerState::update_weights`]), so samples
//! whose loss lands near the chosen band are drawn more often next epoch.
//! Drawing is O(1) per index after an O(N) alias-table build. InfoBatch
//!-style pruning and a uniform baseline live here too so the trainer can
//! swap sampling policies behind one interface.

use std::fmt;
use std::io;
use std::path::Path;

use rand::Rng;
use serde::Serialize;

/// Lower bound applied to every weight so no sample becomes unreachable.
pub const WEIGHT_FLOOR: f64 = 1e-8;

/// Loss spread below this is treated as constant (all weights equal).
pub const DEGENERATE_STD: f64 = 1e-12;

/// Errors from weight maintenance and index drawing.
#[derive(Debug)]
pub enum SamplerError {
    /// The operation needs at least one element.
    Empty,
    /// Paired slices differ in length.
    LengthMismatch { left: usize, right: usize },
    /// A sample id does not exist in the state.
    IndexOutOfRange { id: usize, len: usize },
    /// A loss, weight, or parameter was NaN or infinite.
    NonFinite { what: &'static str, value: f64 },
    /// A parameter violated its domain.
    InvalidParam { what: &'static str, value: f64 },
    /// All weights are zero; there is no distribution to draw from.
    ZeroWeightSum,
    /// Snapshot I/O failed.
    Io(io::Error),
}

impl fmt::Display for SamplerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerError::Empty => write!(f, "input is empty"),
            SamplerError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            SamplerError::IndexOutOfRange { id, len } => {
                write!(f, "sample id {id} out of range for {len} samples")
            }
            SamplerError::NonFinite { what, value } => {
                write!(f, "{what} is not finite: {value}")
            }
            SamplerError::InvalidParam { what, value } => {
                write!(f, "invalid {what}: {value}")
            }
            SamplerError::ZeroWeightSum => write!(f, "weights sum to zero"),
            SamplerError::Io(err) => write!(f, "snapshot i/o: {err}"),
        }
    }
}

impl std::error::Error for SamplerError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SamplerError::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for SamplerError {
    fn from(err: io::Error) -> Self {
        SamplerError::Io(err)
    }
}

impl From<csv::Error> for SamplerError {
    fn from(err: csv::Error) -> Self {
        match err.into_kind() {
            csv::ErrorKind::Io(io_err) => SamplerError::Io(io_err),
            other => SamplerError::Io(io::Error::other(format!("csv: {other:?}"))),
        }
    }
}

type Result<T> = std::result::Result<T, SamplerError>;

/// The user-chosen bias and spread of the weighting bump, in z-score units.
///
/// With `mu = 0` the bump sits on the mean loss; positive `mu` shifts it
/// toward harder samples. Smaller `sigma` concentrates draws more sharply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianWeightParams {
    mu: f64,
    sigma: f64,
}

impl GaussianWeightParams {
    /// Validates `sigma > 0` and finiteness of both parameters.
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(SamplerError::NonFinite { what: "mu", value: mu });
        }
        if !sigma.is_finite() {
            return Err(SamplerError::NonFinite { what: "sigma", value: sigma });
        }
        if sigma <= 0.0 {
            return Err(SamplerError::InvalidParam { what: "sigma", value: sigma });
        }
        Ok(GaussianWeightParams { mu, sigma })
    }

    /// The default bump: centered on the mean loss with unit spread.
    pub fn standard() -> Self {
        GaussianWeightParams { mu: 0.0, sigma: 1.0 }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Weight of a sample at z-score `y`: `(1/(σ√(2π)))·exp(−(y−μ)²/(2σ²))`.
    pub fn density(&self, y: f64) -> f64 {
        self.ln_density(y).exp()
    }

    /// Natural log of [`density`](Self::density), safe far into the tails.
    pub fn ln_density(&self, y: f64) -> f64 {
        let z = (y - self.mu) / self.sigma;
        -0.5 * z * z - (self.sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
    }

    /// Peak value `1/(σ√(2π))`, attained at `y = μ`.
    pub fn peak(&self) -> f64 {
        1.0 / (self.sigma * (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// Mean and population standard deviation of a batch of losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossStats {
    pub mu_x: f64,
    pub sigma_x: f64,
    pub n: usize,
}

impl LossStats {
    /// Computes stats over `losses` with the population (divide by N)
    /// convention.
    pub fn from_losses(losses: &[f64]) -> Result<Self> {
        if losses.is_empty() {
            return Err(SamplerError::Empty);
        }
        for &x in losses {
            if !x.is_finite() {
                return Err(SamplerError::NonFinite { what: "loss", value: x });
            }
        }
        let n = losses.len();
        let mu_x = losses.iter().sum::<f64>() / n as f64;
        let var = losses.iter().map(|x| (x - mu_x) * (x - mu_x)).sum::<f64>() / n as f64;
        Ok(LossStats { mu_x, sigma_x: var.sqrt(), n })
    }

    /// Constructs stats directly; used when moments come from quadrature
    /// rather than samples.
    pub fn from_moments(mu_x: f64, sigma_x: f64, n: usize) -> Result<Self> {
        if !mu_x.is_finite() {
            return Err(SamplerError::NonFinite { what: "mu_x", value: mu_x });
        }
        if !sigma_x.is_finite() || sigma_x < 0.0 {
            return Err(SamplerError::InvalidParam { what: "sigma_x", value: sigma_x });
        }
        Ok(LossStats { mu_x, sigma_x, n })
    }

    /// True when the losses are (numerically) constant.
    pub fn is_degenerate(&self) -> bool {
        self.sigma_x < DEGENERATE_STD
    }

    /// Z-score of `x`; 0 when the stats are degenerate.
    pub fn z(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            (x - self.mu_x) / self.sigma_x
        }
    }
}

/// Per-sample weights and running losses for one training set.
#[derive(Debug, Clone)]
pub struct SamplerState {
    weights: Vec<f64>,
    running_loss: Vec<Option<f64>>,
    epoch: u32,
}

impl SamplerState {
    /// A fresh state over `len` samples: all weights 1, no losses observed.
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(SamplerError::Empty);
        }
        Ok(SamplerState {
            weights: vec![1.0; len],
            running_loss: vec![None; len],
            epoch: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Latest observed loss for `id`, if any batch has visited it.
    pub fn running_loss(&self, id: usize) -> Option<f64> {
        self.running_loss.get(id).copied().flatten()
    }

    /// Number of completed weight updates.
    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn observed_count(&self) -> usize {
        self.running_loss.iter().filter(|x| x.is_some()).count()
    }

    /// Stats over the observed running losses, or `None` before the first
    /// observation.
    pub fn loss_stats(&self) -> Option<LossStats> {
        let observed: Vec<f64> = self.running_loss.iter().flatten().copied().collect();
        LossStats::from_losses(&observed).ok()
    }

    /// Overwrites running losses for the visited `ids` (last write wins).
    ///
    /// The state is untouched if any id is out of range or any loss is not
    /// finite.
    pub fn record_losses(&mut self, ids: &[usize], losses: &[f64]) -> Result<()> {
        if ids.len() != losses.len() {
            return Err(SamplerError::LengthMismatch { left: ids.len(), right: losses.len() });
        }
        for &id in ids {
            if id >= self.len() {
                return Err(SamplerError::IndexOutOfRange { id, len: self.len() });
            }
        }
        for &x in losses {
            if !x.is_finite() {
                return Err(SamplerError::NonFinite { what: "loss", value: x });
            }
        }
        for (&id, &x) in ids.iter().zip(losses) {
            self.running_loss[id] = Some(x);
        }
        Ok(())
    }

    /// Recomputes every weight from the running losses.
    ///
    /// Observed losses are z-normalized against their own mean and
    /// population standard deviation, then weighted by the Gaussian bump;
    /// samples never visited sit at the bump's peak (`y = 0`) so they stay
    /// likely to be explored. Constant losses collapse to equal weights.
    /// All weights are floored at [`WEIGHT_FLOOR`]. Does nothing before the
    /// first observed loss.
    pub fn update_weights(&mut self, params: &GaussianWeightParams) -> Result<()> {
        let observed: Vec<f64> = self.running_loss.iter().flatten().copied().collect();
        if observed.is_empty() {
            return Ok(());
        }
        let stats = LossStats::from_losses(&observed)?;
        for (w, loss) in self.weights.iter_mut().zip(&self.running_loss) {
            let y = match loss {
                Some(x) => stats.z(*x),
                None => 0.0,
            };
            *w = params.density(y).max(WEIGHT_FLOOR);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Draws `n_draws` ids with replacement, `P(i) ∝ w_i`.
    pub fn draw_epoch_indices<R: Rng + ?Sized>(
        &self,
        n_draws: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let table = AliasTable::new(&self.weights)?;
        Ok((0..n_draws).map(|_| table.sample(rng)).collect())
    }
}

/// Vose alias table: O(N) to build, O(1) per draw.
#[derive(Debug, Clone)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    /// Builds the table from nonnegative weights with a positive sum.
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(SamplerError::Empty);
        }
        for &w in weights {
            if !w.is_finite() {
                return Err(SamplerError::NonFinite { what: "weight", value: w });
            }
            if w < 0.0 {
                return Err(SamplerError::InvalidParam { what: "weight", value: w });
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(SamplerError::ZeroWeightSum);
        }
        let n = weights.len();
        let mut scaled: Vec<f64> = weights.iter().map(|&w| w * n as f64 / total).collect();
        let mut prob = vec![1.0; n];
        let mut alias: Vec<usize> = (0..n).collect();
        let mut small = Vec::with_capacity(n);
        let mut large = Vec::with_capacity(n);
        for (i, &p) in scaled.iter().enumerate() {
            if p < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        Ok(AliasTable { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    /// Draws one index.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let i = rng.random_range(0..self.prob.len());
        if rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

/// Self-normalized expected loss `Σ w_i·x_i / Σ w_i` under the sampling
/// distribution induced by `weights`.
pub fn expected_weighted_loss(weights: &[f64], losses: &[f64]) -> Result<f64> {
    if weights.len() != losses.len() {
        return Err(SamplerError::LengthMismatch { left: weights.len(), right: losses.len() });
    }
    if weights.is_empty() {
        return Err(SamplerError::Empty);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&w, &x) in weights.iter().zip(losses) {
        if !w.is_finite() {
            return Err(SamplerError::NonFinite { what: "weight", value: w });
        }
        if w < 0.0 {
            return Err(SamplerError::InvalidParam { what: "weight", value: w });
        }
        if !x.is_finite() {
            return Err(SamplerError::NonFinite { what: "loss", value: x });
        }
        num += w * x;
        den += w;
    }
    if den <= 0.0 {
        return Err(SamplerError::ZeroWeightSum);
    }
    Ok(num / den)
}

/// InfoBatch-style pruning policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InfoBatchParams {
    prune_ratio: f64,
    anneal_fraction: f64,
    rescale_kept: bool,
}

impl InfoBatchParams {
    /// Validates `0 ≤ prune_ratio < 1` and `0 < anneal_fraction ≤ 1`.
    pub fn new(prune_ratio: f64, anneal_fraction: f64, rescale_kept: bool) -> Result<Self> {
        if !prune_ratio.is_finite() {
            return Err(SamplerError::NonFinite { what: "prune_ratio", value: prune_ratio });
        }
        if !(0.0..1.0).contains(&prune_ratio) {
            return Err(SamplerError::InvalidParam { what: "prune_ratio", value: prune_ratio });
        }
        if !anneal_fraction.is_finite() {
            return Err(SamplerError::NonFinite {
                what: "anneal_fraction",
                value: anneal_fraction,
            });
        }
        if !(anneal_fraction > 0.0 && anneal_fraction <= 1.0) {
            return Err(SamplerError::InvalidParam {
                what: "anneal_fraction",
                value: anneal_fraction,
            });
        }
        Ok(InfoBatchParams { prune_ratio, anneal_fraction, rescale_kept })
    }

    /// The conventional policy: anneal at 87.5% of training, rescale kept
    /// below-mean losses by `1/(1−s)`.
    pub fn standard(prune_ratio: f64) -> Result<Self> {
        InfoBatchParams::new(prune_ratio, 0.875, true)
    }

    pub fn prune_ratio(&self) -> f64 {
        self.prune_ratio
    }

    pub fn anneal_fraction(&self) -> f64 {
        self.anneal_fraction
    }

    pub fn rescale_kept(&self) -> bool {
        self.rescale_kept
    }
}

/// The samples an InfoBatch epoch keeps, with per-sample loss scales.
#[derive(Debug, Clone)]
pub struct InfoBatchPlan {
    pub ids: Vec<usize>,
    pub scales: Vec<f64>,
}

/// Selects this epoch's samples under InfoBatch pruning.
///
/// While `epoch < anneal_fraction·total_epochs`, each sample whose running
/// loss is below the mean of observed losses is dropped with probability
/// `prune_ratio`; survivors get loss scale `1/(1−prune_ratio)` (when
/// rescaling is on) so the expected loss sum is preserved. Samples at or
/// above the mean, and samples with no observed loss yet, are always kept
/// at scale 1. After the anneal point everything is kept at scale 1.
pub fn infobatch_filter<R: Rng + ?Sized>(
    state: &SamplerState,
    params: &InfoBatchParams,
    epoch: usize,
    total_epochs: usize,
    rng: &mut R,
) -> InfoBatchPlan {
    let n = state.len();
    let anneal_done =
        (epoch as f64) >= params.anneal_fraction() * total_epochs as f64;
    let mean = state.loss_stats().map(|s| s.mu_x);
    let kept_scale = if params.rescale_kept() {
        1.0 / (1.0 - params.prune_ratio())
    } else {
        1.0
    };
    let mut ids = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    for id in 0..n {
        let below_mean = match (state.running_loss(id), mean) {
            (Some(x), Some(m)) => x < m,
            _ => false,
        };
        if anneal_done || !below_mean {
            ids.push(id);
            scales.push(1.0);
        } else if rng.random::<f64>() >= params.prune_ratio() {
            ids.push(id);
            scales.push(kept_scale);
        }
    }
    InfoBatchPlan { ids, scales }
}

/// Draws `n_draws` ids uniformly with replacement from `0..n`.
pub fn uniform_sampler<R: Rng + ?Sized>(n: usize, n_draws: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 && n_draws > 0 {
        return Err(SamplerError::Empty);
    }
    Ok((0..n_draws).map(|_| rng.random_range(0..n)).collect())
}

/// Writes the state as CSV rows `id,loss,weight`; the loss field is empty
/// for samples never visited.
pub fn write_weight_snapshot(state: &SamplerState, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["id", "loss", "weight"])?;
    for id in 0..state.len() {
        let loss = match state.running_loss(id) {
            Some(x) => x.to_string(),
            None => String::new(),
        };
        writer.write_record([id.to_string(), loss, state.weights()[id].to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads rows written by [`write_weight_snapshot`].
pub fn read_weight_snapshot(path: &Path) -> Result<Vec<(usize, Option<f64>, f64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse = |field: &str, what: &'static str| -> Result<f64> {
            field.parse::<f64>().map_err(|_| SamplerError::InvalidParam {
                what,
                value: f64::NAN,
            })
        };
        let id = record
            .get(0)
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or(SamplerError::InvalidParam { what: "snapshot id", value: f64::NAN })?;
        let loss = match record.get(1) {
            None | Some("") => None,
            Some(s) => Some(parse(s, "snapshot loss")?),
        };
        let weight = parse(record.get(2).unwrap_or(""), "snapshot weight")?;
        rows.push((id, loss, weight));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    const PHI_AT_0: f64 = 0.398_942_280_401_432_7;
    const PHI_AT_1: f64 = 0.241_970_724_519_143_37;
    const PHI_AT_Z123: f64 = 0.188_446_989_735_864_03;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn params_validate_domain() {
        assert!(GaussianWeightParams::new(0.0, 1.0).is_ok());
        assert!(matches!(
            GaussianWeightParams::new(0.0, 0.0),
            Err(SamplerError::InvalidParam { what: "sigma", .. })
        ));
        assert!(GaussianWeightParams::new(0.0, -1.0).is_err());
        assert!(GaussianWeightParams::new(f64::NAN, 1.0).is_err());
        assert!(GaussianWeightParams::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn loss_stats_population_convention() {
        let stats = LossStats::from_losses(&[1.0, 2.0, 3.0]).unwrap();
        assert_relative_eq!(stats.mu_x, 2.0);
        assert_relative_eq!(stats.sigma_x, (2.0f64 / 3.0).sqrt(), max_relative = 1e-15);
        assert_eq!(stats.n, 3);
        assert!(LossStats::from_losses(&[]).is_err());
        assert!(LossStats::from_losses(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn new_state_has_unit_weights() {
        let state = SamplerState::new(5).unwrap();
        assert_eq!(state.weights(), &[1.0; 5]);
        assert_eq!(state.epoch(), 0);
        assert_eq!(state.observed_count(), 0);
        assert!(SamplerState::new(0).is_err());
    }

    #[test]
    fn update_weights_on_1_2_3() {
        let mut state = SamplerState::new(3).unwrap();
        state.record_losses(&[0, 1, 2], &[1.0, 2.0, 3.0]).unwrap();
        state.update_weights(&GaussianWeightParams::standard()).unwrap();
        let w = state.weights();
        assert_relative_eq!(w[0], PHI_AT_Z123, max_relative = 1e-9);
        assert_relative_eq!(w[1], PHI_AT_0, max_relative = 1e-9);
        assert_relative_eq!(w[2], PHI_AT_Z123, max_relative = 1e-9);
        assert_eq!(state.epoch(), 1);
    }

    #[test]
    fn constant_losses_collapse_to_equal_weights() {
        let mut state = SamplerState::new(3).unwrap();
        state.record_losses(&[0, 1, 2], &[2.0, 2.0, 2.0]).unwrap();
        state.update_weights(&GaussianWeightParams::standard()).unwrap();
        for &w in state.weights() {
            assert_relative_eq!(w, PHI_AT_0, max_relative = 1e-12);
        }

        let mut biased = SamplerState::new(3).unwrap();
        biased.record_losses(&[0, 1, 2], &[2.0, 2.0, 2.0]).unwrap();
        biased
            .update_weights(&GaussianWeightParams::new(1.0, 1.0).unwrap())
            .unwrap();
        for &w in biased.weights() {
            assert_relative_eq!(w, PHI_AT_1, max_relative = 1e-12);
        }
    }

    #[test]
    fn update_without_observations_is_identity() {
        let mut state = SamplerState::new(4).unwrap();
        state.update_weights(&GaussianWeightParams::standard()).unwrap();
        assert_eq!(state.weights(), &[1.0; 4]);
        assert_eq!(state.epoch(), 0);
    }

    #[test]
    fn unobserved_samples_sit_at_the_peak() {
        let mut state = SamplerState::new(3).unwrap();
        state.record_losses(&[0, 2], &[1.0, 3.0]).unwrap();
        state.update_weights(&GaussianWeightParams::standard()).unwrap();
        let w = state.weights();
        assert_relative_eq!(w[0], PHI_AT_1, max_relative = 1e-12);
        assert_relative_eq!(w[1], PHI_AT_0, max_relative = 1e-12);
        assert_relative_eq!(w[2], PHI_AT_1, max_relative = 1e-12);
    }

    #[test]
    fn far_outliers_hit_the_floor() {
        let mut losses = vec![0.0; 99];
        losses.push(1e6);
        let ids: Vec<usize> = (0..100).collect();
        let mut state = SamplerState::new(100).unwrap();
        state.record_losses(&ids, &losses).unwrap();
        state.update_weights(&GaussianWeightParams::standard()).unwrap();
        assert_eq!(state.weights()[99], WEIGHT_FLOOR);
        assert!(state.weights()[0] > WEIGHT_FLOOR);
    }

    #[test]
    fn affine_invariance_of_weights() {
        let losses = [0.3, -1.2, 4.5, 0.3, 2.2];
        let ids: Vec<usize> = (0..losses.len()).collect();
        let params = GaussianWeightParams::new(0.5, 1.5).unwrap();

        let mut plain = SamplerState::new(losses.len()).unwrap();
        plain.record_losses(&ids, &losses).unwrap();
        plain.update_weights(&params).unwrap();

        let mapped: Vec<f64> = losses.iter().map(|x| 2.5 * x + 7.0).collect();
        let mut affine = SamplerState::new(losses.len()).unwrap();
        affine.record_losses(&ids, &mapped).unwrap();
        affine.update_weights(&params).unwrap();

        for (a, b) in plain.weights().iter().zip(affine.weights()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn record_losses_last_write_wins() {
        let mut state = SamplerState::new(4).unwrap();
        state.record_losses(&[3], &[0.5]).unwrap();
        state.record_losses(&[3], &[0.2]).unwrap();
        assert_eq!(state.running_loss(3), Some(0.2));
        assert_eq!(state.observed_count(), 1);
    }

    #[test]
    fn record_losses_rejects_bad_input_without_mutating() {
        let mut state = SamplerState::new(2).unwrap();
        state.record_losses(&[0], &[1.0]).unwrap();

        assert!(matches!(
            state.record_losses(&[0, 1], &[1.0]),
            Err(SamplerError::LengthMismatch { .. })
        ));
        assert!(matches!(
            state.record_losses(&[2], &[1.0]),
            Err(SamplerError::IndexOutOfRange { id: 2, len: 2 })
        ));
        assert!(matches!(
            state.record_losses(&[0, 1], &[2.0, f64::NAN]),
            Err(SamplerError::NonFinite { .. })
        ));
        assert_eq!(state.running_loss(0), Some(1.0));
        assert_eq!(state.running_loss(1), None);

        state.record_losses(&[], &[]).unwrap();
        assert_eq!(state.observed_count(), 1);
    }

    #[test]
    fn alias_table_rejects_bad_weights() {
        assert!(matches!(AliasTable::new(&[]), Err(SamplerError::Empty)));
        assert!(AliasTable::new(&[1.0, f64::NAN]).is_err());
        assert!(AliasTable::new(&[1.0, -0.5]).is_err());
        assert!(matches!(
            AliasTable::new(&[0.0, 0.0]),
            Err(SamplerError::ZeroWeightSum)
        ));
    }

    #[test]
    fn single_support_draws_stay_on_support() {
        let mut weights = vec![WEIGHT_FLOOR; 10];
        weights[0] = 1.0;
        let table = AliasTable::new(&weights).unwrap();
        let mut r = rng(11);
        let off_support = (0..100_000).filter(|_| table.sample(&mut r) != 0).count();
        assert!(
            off_support <= 10,
            "off-support frequency {} above 1e-4",
            off_support as f64 / 1e5
        );
    }

    #[test]
    fn alias_frequencies_match_1_2_3() {
        let table = AliasTable::new(&[1.0, 2.0, 3.0]).unwrap();
        let mut r = rng(7);
        let mut counts = [0u32; 3];
        let n_draws = 60_000;
        for _ in 0..n_draws {
            counts[table.sample(&mut r)] += 1;
        }
        let expected = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (count, want) in counts.iter().zip(expected) {
            let freq = f64::from(*count) / f64::from(n_draws);
            assert!(
                (freq / want - 1.0).abs() < 0.02,
                "frequency {freq} vs expected {want}"
            );
        }
    }

    fn chi_square_p_value(counts: &[u64], probs: &[f64], n_draws: u64) -> f64 {
        let stat: f64 = counts
            .iter()
            .zip(probs)
            .map(|(&c, &p)| {
                let expect = p * n_draws as f64;
                (c as f64 - expect) * (c as f64 - expect) / expect
            })
            .sum();
        let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
        1.0 - dist.cdf(stat)
    }

    #[test]
    fn uniform_weights_pass_chi_square() {
        let n = 50;
        let table = AliasTable::new(&vec![1.0; n]).unwrap();
        let mut r = rng(3);
        let mut counts = vec![0u64; n];
        let n_draws = 1_000_000u64;
        for _ in 0..n_draws {
            counts[table.sample(&mut r)] += 1;
        }
        let probs = vec![1.0 / n as f64; n];
        let p = chi_square_p_value(&counts, &probs, n_draws);
        assert!(p > 0.001, "chi-square p-value {p}");
    }

    #[test]
    fn weighted_frequencies_converge() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let table = AliasTable::new(&probs).unwrap();
        let mut r = rng(13);
        let mut counts = [0u64; 4];
        let n_draws = 1_000_000u64;
        for _ in 0..n_draws {
            counts[table.sample(&mut r)] += 1;
        }
        for (count, want) in counts.iter().zip(probs) {
            let freq = *count as f64 / n_draws as f64;
            assert!((freq - want).abs() < 0.002, "frequency {freq} vs {want}");
        }
        let p = chi_square_p_value(&counts, &probs, n_draws);
        assert!(p > 0.001, "chi-square p-value {p}");
    }

    #[test]
    fn draw_epoch_indices_is_deterministic_per_seed() {
        let mut state = SamplerState::new(6).unwrap();
        state
            .record_losses(&[0, 1, 2, 3, 4, 5], &[1.0, 4.0, 2.0, 8.0, 3.0, 5.0])
            .unwrap();
        state.update_weights(&GaussianWeightParams::standard()).unwrap();
        let a = state.draw_epoch_indices(64, &mut rng(42)).unwrap();
        let b = state.draw_epoch_indices(64, &mut rng(42)).unwrap();
        let c = state.draw_epoch_indices(64, &mut rng(43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&id| id < 6));
    }

    #[test]
    fn expected_weighted_loss_examples() {
        assert_relative_eq!(expected_weighted_loss(&[1.0, 1.0], &[2.0, 4.0]).unwrap(), 3.0);
        assert_relative_eq!(expected_weighted_loss(&[1.0, 0.0], &[2.0, 4.0]).unwrap(), 2.0);
        assert!(matches!(
            expected_weighted_loss(&[0.0, 0.0], &[2.0, 4.0]),
            Err(SamplerError::ZeroWeightSum)
        ));
        assert!(expected_weighted_loss(&[1.0], &[2.0, 4.0]).is_err());
        assert!(expected_weighted_loss(&[], &[]).is_err());
        assert!(expected_weighted_loss(&[-1.0, 2.0], &[2.0, 4.0]).is_err());
    }

    #[test]
    fn resampled_mean_loss_matches_expected_weighted_loss() {
        let weights = [0.1, 0.2, 0.3, 0.4];
        let losses = [5.0, 1.0, 8.0, 2.0];
        let want = expected_weighted_loss(&weights, &losses).unwrap();
        assert_relative_eq!(want, 3.9, max_relative = 1e-12);

        let table = AliasTable::new(&weights).unwrap();
        let mut r = rng(29);
        let n_draws = 100_000;
        let mean: f64 = (0..n_draws)
            .map(|_| losses[table.sample(&mut r)])
            .sum::<f64>()
            / n_draws as f64;

        let second: f64 = weights
            .iter()
            .zip(losses)
            .map(|(&w, x)| w * x * x)
            .sum::<f64>()
            / weights.iter().sum::<f64>();
        let std_err = ((second - want * want) / n_draws as f64).sqrt();
        assert!(
            (mean - want).abs() < 3.0 * std_err,
            "resampled mean {mean} vs expected {want} (3se = {})",
            3.0 * std_err
        );
    }

    #[test]
    fn infobatch_zero_ratio_is_identity() {
        let mut state = SamplerState::new(5).unwrap();
        state
            .record_losses(&[0, 1, 2, 3, 4], &[1.0, 2.0, 3.0, 4.0, 5.0])
            .unwrap();
        let params = InfoBatchParams::new(0.0, 0.875, true).unwrap();
        let plan = infobatch_filter(&state, &params, 0, 100, &mut rng(1));
        assert_eq!(plan.ids, vec![0, 1, 2, 3, 4]);
        assert!(plan.scales.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn infobatch_never_prunes_at_or_above_mean() {
        let mut state = SamplerState::new(3).unwrap();
        state.record_losses(&[0, 1, 2], &[1.0, 1.0, 5.0]).unwrap();
        let params = InfoBatchParams::standard(0.9).unwrap();
        for seed in 0..50 {
            let plan = infobatch_filter(&state, &params, 0, 100, &mut rng(seed));
            assert!(plan.ids.contains(&2));
            let pos = plan.ids.iter().position(|&id| id == 2).unwrap();
            assert_eq!(plan.scales[pos], 1.0);
        }
    }

    #[test]
    fn infobatch_prunes_below_mean_at_the_requested_rate() {
        let n = 200_000;
        let ids: Vec<usize> = (0..n).collect();
        let losses: Vec<f64> = (0..n).map(|i| if i < n / 2 { 0.0 } else { 10.0 }).collect();
        let mut state = SamplerState::new(n).unwrap();
        state.record_losses(&ids, &losses).unwrap();
        let params = InfoBatchParams::standard(0.5).unwrap();
        let plan = infobatch_filter(&state, &params, 0, 100, &mut rng(17));

        let below_kept = plan.ids.iter().filter(|&&id| id < n / 2).count();
        let kept_fraction = below_kept as f64 / (n / 2) as f64;
        assert!(
            (0.495..=0.505).contains(&kept_fraction),
            "kept fraction {kept_fraction}"
        );
        for (&id, &scale) in plan.ids.iter().zip(&plan.scales) {
            if id < n / 2 {
                assert_relative_eq!(scale, 2.0);
            } else {
                assert_eq!(scale, 1.0);
            }
        }
        let above_kept = plan.ids.iter().filter(|&&id| id >= n / 2).count();
        assert_eq!(above_kept, n / 2);
    }

    #[test]
    fn infobatch_expectation_is_preserved_by_rescaling() {
        let n = 200_000;
        let ids: Vec<usize> = (0..n).collect();
        let losses: Vec<f64> = (0..n).map(|i| (i % 97) as f64 / 97.0).collect();
        let mut state = SamplerState::new(n).unwrap();
        state.record_losses(&ids, &losses).unwrap();
        let params = InfoBatchParams::standard(0.3).unwrap();
        let plan = infobatch_filter(&state, &params, 0, 100, &mut rng(23));

        let scaled_sum: f64 = plan
            .ids
            .iter()
            .zip(&plan.scales)
            .map(|(&id, &scale)| losses[id] * scale)
            .sum();
        let full_sum: f64 = losses.iter().sum();
        assert_relative_eq!(scaled_sum, full_sum, max_relative = 5e-3);
    }

    #[test]
    fn infobatch_anneal_boundary_keeps_everything() {
        let mut state = SamplerState::new(4).unwrap();
        state.record_losses(&[0, 1, 2, 3], &[0.0, 0.0, 0.0, 10.0]).unwrap();
        let params = InfoBatchParams::standard(0.9).unwrap();

        let pruning = infobatch_filter(&state, &params, 87, 100, &mut rng(5));
        assert!(pruning.ids.len() < 4);

        let done = infobatch_filter(&state, &params, 88, 100, &mut rng(5));
        assert_eq!(done.ids, vec![0, 1, 2, 3]);
        assert!(done.scales.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn infobatch_params_validate_domain() {
        assert!(InfoBatchParams::new(1.0, 0.875, true).is_err());
        assert!(InfoBatchParams::new(-0.1, 0.875, true).is_err());
        assert!(InfoBatchParams::new(0.3, 0.0, true).is_err());
        assert!(InfoBatchParams::new(0.3, 1.5, true).is_err());
        assert!(InfoBatchParams::new(f64::NAN, 0.875, true).is_err());
    }

    #[test]
    fn uniform_sampler_edge_cases() {
        assert_eq!(uniform_sampler(1, 5, &mut rng(0)).unwrap(), vec![0; 5]);
        assert!(uniform_sampler(3, 0, &mut rng(0)).unwrap().is_empty());
        assert!(uniform_sampler(0, 1, &mut rng(0)).is_err());
    }

    #[test]
    fn uniform_sampler_passes_chi_square() {
        let n = 10;
        let mut r = rng(19);
        let mut counts = vec![0u64; n];
        let n_draws = 1_000_000u64;
        for id in uniform_sampler(n, n_draws as usize, &mut r).unwrap() {
            counts[id] += 1;
        }
        let probs = vec![1.0 / n as f64; n];
        let p = chi_square_p_value(&counts, &probs, n_draws);
        assert!(p > 0.001, "chi-square p-value {p}");
    }

    #[test]
    fn snapshot_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.csv");
        let mut state = SamplerState::new(4).unwrap();
        state.record_losses(&[1, 3], &[0.25, 4.0]).unwrap();
        state.update_weights(&GaussianWeightParams::standard()).unwrap();
        write_weight_snapshot(&state, &path).unwrap();

        let rows = read_weight_snapshot(&path).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].0, 0);
        assert_eq!(rows[0].1, None);
        assert_eq!(rows[1].1, Some(0.25));
        assert_eq!(rows[3].1, Some(4.0));
        for (id, _, weight) in &rows {
            assert_relative_eq!(*weight, state.weights()[*id], max_relative = 1e-12);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn finite_losses() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-1e3..1e3f64, 2..40)
        }

        proptest! {
            #[test]
            fn weights_stay_in_band(
                losses in finite_losses(),
                mu in -3.0..3.0f64,
                sigma in 0.1..5.0f64,
            ) {
                let params = GaussianWeightParams::new(mu, sigma).unwrap();
                let ids: Vec<usize> = (0..losses.len()).collect();
                let mut state = SamplerState::new(losses.len()).unwrap();
                state.record_losses(&ids, &losses).unwrap();
                state.update_weights(&params).unwrap();
                for &w in state.weights() {
                    prop_assert!(w.is_finite());
                    prop_assert!(w >= WEIGHT_FLOOR);
                    prop_assert!(w <= params.peak() * (1.0 + 1e-12));
                }
            }

            #[test]
            fn closest_to_biased_mean_gets_max_weight(
                losses in finite_losses(),
                mu in -2.0..2.0f64,
            ) {
                let stats = LossStats::from_losses(&losses).unwrap();
                prop_assume!(stats.sigma_x > 1e-6);
                let params = GaussianWeightParams::new(mu, 1.0).unwrap();
                let ids: Vec<usize> = (0..losses.len()).collect();
                let mut state = SamplerState::new(losses.len()).unwrap();
                state.record_losses(&ids, &losses).unwrap();
                state.update_weights(&params).unwrap();

                let target = stats.mu_x + mu * stats.sigma_x;
                let closest = (0..losses.len())
                    .min_by(|&a, &b| {
                        (losses[a] - target)
                            .abs()
                            .partial_cmp(&(losses[b] - target).abs())
                            .unwrap()
                    })
                    .unwrap();
                for &w in state.weights() {
                    prop_assert!(state.weights()[closest] >= w);
                }
            }

            #[test]
            fn alias_samples_stay_in_range(
                weights in proptest::collection::vec(0.0..10.0f64, 1..30),
                seed in 0u64..1000,
            ) {
                prop_assume!(weights.iter().sum::<f64>() > 0.0);
                let table = AliasTable::new(&weights).unwrap();
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..200 {
                    prop_assert!(table.sample(&mut r) < weights.len());
                }
            }

            #[test]
            fn expected_weighted_loss_is_a_convex_combination(
                pairs in proptest::collection::vec((0.01..5.0f64, -1e3..1e3f64), 1..30),
            ) {
                let (weights, losses): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                let value = expected_weighted_loss(&weights, &losses).unwrap();
                let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(value >= lo - 1e-9 && value <= hi + 1e-9);
            }
        }
    }
}
