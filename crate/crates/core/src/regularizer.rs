//! Modified stable rank (mSR) penalty.
//!
//! For singular values `sigma_1 >= ... >= sigma_R` of `W` and a target rank
//! `r`,
//!
//! ```text
//! mSR(W, r) = (sigma_{r+1} + ... + sigma_R) / (sigma_1 + ... + sigma_r)
//! ```
//!
//! Writing `T` and `H` for the tail and head sums, its gradient is
//!
//! ```text
//! dmSR/dW = (T / H) * (U_tail V_tail^T / T - U_head V_head^T / H)
//! ```
//!
//! During regularized training the SVD of each weight is refreshed only every
//! `svd_refresh_iters` steps; between refreshes the cached gradient is reused
//! and only the schedule's lambda changes.

use log::warn;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{reconstruct, svd_full, svd_randomized, Matrix, RandomizedParams, SvdFactors};
use crate::nn::{Layer, LayerGrad, Model, Penalty, StepInfo};
use crate::ranksel::RankVector;

/// Splits closer than this are reported as degenerate.
pub const DEGENERATE_GAP: f64 = 1e-9;

/// Relative size under which a tail sum counts as zero.
const ZERO_TAIL: f64 = 1e-12;

/// `||W||_F^2 / ||W||_2^2`.
pub fn stable_rank(w: &Matrix) -> Result<f64> {
    let f = svd_full(w)?;
    if f.sigma[0] <= 0.0 {
        return Err(Error::invalid("stable rank of a zero matrix"));
    }
    Ok(f.sigma.iter().map(|s| s * s).sum::<f64>() / (f.sigma[0] * f.sigma[0]))
}

fn check_rank(r: usize, full: usize) -> Result<()> {
    if r == 0 || r > full {
        return Err(Error::invalid(format!("rank {r} outside 1..={full}")));
    }
    Ok(())
}

/// mSR from a descending singular-value list.
pub fn msr_from_sigma(sigma: &[f64], r: usize) -> Result<f64> {
    check_rank(r, sigma.len())?;
    let head: f64 = sigma[..r].iter().sum();
    if head <= 0.0 {
        return Err(Error::invalid("mSR undefined: leading singular values are zero"));
    }
    if r == sigma.len() {
        return Ok(0.0);
    }
    Ok(sigma[r..].iter().sum::<f64>() / head)
}

pub fn msr_value(w: &Matrix, r: usize) -> Result<f64> {
    let f = svd_full(w)?;
    msr_from_sigma(f.sigma.as_slice().expect("contiguous"), r)
}

/// Gradient of mSR at the factorization `f`. Returns the zero matrix when
/// the tail is empty or numerically zero. The flag reports a degenerate
/// split (`sigma_r - sigma_{r+1} < 1e-9`), where the result is one valid
/// subgradient among many.
pub fn msr_gradient_from_factors(f: &SvdFactors, r: usize) -> Result<(Matrix, bool)> {
    let full = f.rank();
    check_rank(r, full)?;
    let sigma = f.sigma.as_slice().expect("contiguous");
    let head: f64 = sigma[..r].iter().sum();
    if head <= 0.0 {
        return Err(Error::invalid("mSR undefined: leading singular values are zero"));
    }
    let tail: f64 = sigma[r..].iter().sum();
    let (m, n) = (f.u.nrows(), f.v.nrows());
    if r == full || tail <= ZERO_TAIL * head {
        return Ok((Array2::zeros((m, n)), false));
    }
    let degenerate = sigma[r - 1] - sigma[r] < DEGENERATE_GAP;

    let coeff = tail / head;
    let ones_head = ndarray::Array1::from_elem(r, -coeff / head);
    let ones_tail = ndarray::Array1::from_elem(full - r, coeff / tail);
    let g = reconstruct(&f.u.slice(s![.., ..r]).to_owned(), &ones_head, &f.v.slice(s![.., ..r]).to_owned())
        + reconstruct(&f.u.slice(s![.., r..]).to_owned(), &ones_tail, &f.v.slice(s![.., r..]).to_owned());
    Ok((g, degenerate))
}

pub fn msr_gradient(w: &Matrix, r: usize) -> Result<Matrix> {
    let (g, degenerate) = msr_gradient_from_factors(&svd_full(w)?, r)?;
    if degenerate {
        warn!("mSR gradient at a degenerate split (rank {r})");
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    /// `lambda0 * b^floor(epoch / period)`.
    #[default]
    Scheduled,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SvdMode {
    #[default]
    Exact,
    /// Randomized range finder with `k = R`.
    Randomized {
        oversampling: usize,
        power_iters: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegSchedule {
    pub lambda0: f64,
    /// Growth factor `b` applied every `period_epochs`.
    pub growth: f64,
    pub period_epochs: usize,
    pub svd_refresh_iters: usize,
    pub mode: LambdaMode,
    pub svd: SvdMode,
}

impl Default for RegSchedule {
    fn default() -> Self {
        Self {
            lambda0: 0.02,
            growth: 1.5,
            period_epochs: 15,
            svd_refresh_iters: 64,
            mode: LambdaMode::Scheduled,
            svd: SvdMode::Exact,
        }
    }
}

impl RegSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad_lambda = !self.lambda0.is_finite() || self.lambda0 <= 0.0;
        let bad_growth = !self.growth.is_finite() || self.growth < 1.0;
        if bad_lambda || bad_growth || self.period_epochs == 0 || self.svd_refresh_iters == 0 {
            return Err(Error::Config(format!("invalid regularization schedule {self:?}")));
        }
        Ok(())
    }
}

pub fn lambda_at(schedule: &RegSchedule, epoch: usize) -> f64 {
    match schedule.mode {
        LambdaMode::Fixed => schedule.lambda0,
        LambdaMode::Scheduled => {
            let period = schedule.period_epochs.max(1);
            schedule.lambda0 * schedule.growth.powi((epoch / period) as i32)
        }
    }
}

/// Cached factorization of one regularized layer.
#[derive(Debug, Clone)]
pub struct CachedLayer {
    pub factors: SvdFactors,
    pub rank: usize,
    /// `dmSR/dW` at the cached factors.
    pub gradient: Matrix,
    pub degenerate: bool,
}

impl CachedLayer {
    pub fn head(&self) -> (Matrix, ndarray::Array1<f64>, Matrix) {
        let r = self.rank;
        (
            self.factors.u.slice(s![.., ..r]).to_owned(),
            self.factors.sigma.slice(s![..r]).to_owned(),
            self.factors.v.slice(s![.., ..r]).to_owned(),
        )
    }

    pub fn tail(&self) -> (Matrix, ndarray::Array1<f64>, Matrix) {
        let r = self.rank;
        (
            self.factors.u.slice(s![.., r..]).to_owned(),
            self.factors.sigma.slice(s![r..]).to_owned(),
            self.factors.v.slice(s![.., r..]).to_owned(),
        )
    }
}

/// Per-layer factors for the current targets, stamped with the iteration
/// they were computed at. `None` marks layers that are not regularized.
#[derive(Debug, Clone, Default)]
pub struct MsrCache {
    pub layers: Vec<Option<CachedLayer>>,
    pub stamp: Option<usize>,
}

impl MsrCache {
    pub fn is_stale(&self, iteration: usize, refresh: usize) -> bool {
        match self.stamp {
            None => true,
            Some(s) => iteration < s || iteration - s >= refresh,
        }
    }

    pub fn refresh(&mut self, model: &Model, targets: &RankVector, svd: SvdMode, iteration: usize) -> Result<()> {
        if targets.len() != model.layers.len() {
            return Err(Error::invalid("one target rank per layer required"));
        }
        let mut layers = Vec::with_capacity(targets.len());
        for (i, (layer, &r)) in model.layers.iter().zip(targets.iter()).enumerate() {
            let Layer::Dense(d) = layer else {
                return Err(Error::invalid(format!("layer {i}: cannot regularize a factorized layer")));
            };
            let full = d.w.nrows().min(d.w.ncols());
            check_rank(r, full)?;
            if r == full {
                layers.push(None);
                continue;
            }
            let factors = match svd {
                SvdMode::Exact => svd_full(&d.w)?,
                SvdMode::Randomized { oversampling, power_iters } => svd_randomized(
                    &d.w,
                    full,
                    RandomizedParams {
                        oversampling,
                        power_iters,
                        seed: iteration as u64,
                    },
                )?,
            };
            let (gradient, degenerate) = msr_gradient_from_factors(&factors, r)?;
            if degenerate {
                warn!("layer {i}: degenerate mSR split at rank {r} (iteration {iteration})");
            }
            layers.push(Some(CachedLayer {
                factors,
                rank: r,
                gradient,
                degenerate,
            }));
        }
        self.layers = layers;
        self.stamp = Some(iteration);
        Ok(())
    }
}

/// Per-layer penalty-gradient contributions `lambda(epoch) * dmSR/dW_l` from
/// the cache, refreshing it first when it is older than the refresh interval.
pub fn penalized_step_hook(
    model: &Model,
    cache: &mut MsrCache,
    schedule: &RegSchedule,
    targets: &RankVector,
    iteration: usize,
    epoch: usize,
) -> Result<Vec<Option<Matrix>>> {
    if cache.is_stale(iteration, schedule.svd_refresh_iters) {
        cache.refresh(model, targets, schedule.svd, iteration)?;
    }
    let lambda = lambda_at(schedule, epoch);
    Ok(cache
        .layers
        .iter()
        .map(|c| c.as_ref().map(|c| &c.gradient * lambda))
        .collect())
}

/// Rank re-selection used by the ablation modes that move the targets
/// during training.
pub type Retarget<'a> = Box<dyn FnMut(&Model) -> Result<RankVector> + 'a>;

/// Adds `lambda * sum_l mSR(W_l, r_l)` to the training loss.
pub struct MsrRegularizer<'a> {
    pub schedule: RegSchedule,
    pub targets: RankVector,
    pub cache: MsrCache,
    retarget: Option<(usize, usize, Retarget<'a>)>,
    /// Targets in force after each re-selection, for reporting.
    pub target_history: Vec<(usize, RankVector)>,
}

impl<'a> MsrRegularizer<'a> {
    pub fn new(schedule: RegSchedule, targets: RankVector) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            schedule,
            target_history: vec![(0, targets.clone())],
            targets,
            cache: MsrCache::default(),
            retarget: None,
        })
    }

    /// Re-selects the targets after every `every_epochs` epochs, except
    /// after the last of `total_epochs`.
    pub fn with_retarget(mut self, every_epochs: usize, total_epochs: usize, f: Retarget<'a>) -> Self {
        self.retarget = Some((every_epochs.max(1), total_epochs, f));
        self
    }
}

impl Penalty for MsrRegularizer<'_> {
    fn apply(&mut self, model: &Model, grads: &mut [LayerGrad], step: StepInfo) -> Result<()> {
        let contrib = penalized_step_hook(
            model,
            &mut self.cache,
            &self.schedule,
            &self.targets,
            step.iteration,
            step.epoch,
        )?;
        for (g, c) in grads.iter_mut().zip(contrib) {
            if let Some(c) = c {
                g.weights[0] += &c;
            }
        }
        Ok(())
    }

    fn lambda(&self, epoch: usize) -> f64 {
        lambda_at(&self.schedule, epoch)
    }

    fn on_epoch_end(&mut self, model: &Model, epoch: usize) -> Result<()> {
        if let Some((every, total, f)) = self.retarget.as_mut() {
            if (epoch + 1).is_multiple_of(*every) && epoch + 1 < *total {
                let next = f(model)?;
                log::info!("epoch {epoch}: targets {} -> {next}", self.targets);
                self.targets = next.clone();
                self.target_history.push((epoch + 1, next));
                self.cache.stamp = None;
            }
        }
        Ok(())
    }

    fn layer_values(&self, model: &Model) -> Option<Vec<f64>> {
        layer_msr(model, &self.targets).ok()
    }
}

/// mSR of every layer at its target (0 for full-rank targets).
pub fn layer_msr(model: &Model, targets: &RankVector) -> Result<Vec<f64>> {
    model
        .layers
        .iter()
        .zip(targets.iter())
        .map(|(l, &r)| msr_value(&l.effective_weight(), r))
        .collect()
}
