//! Rank-vector search.
//!
//! The main entry point is [`mbs_search`], a beam search over rank vectors
//! that walks down from full rank in steps of `s`, keeps the `K` most
//! accurate admissible candidates per level, and halves `s` (by `gamma`)
//! whenever a level produces nothing admissible. [`multi_config_search`]
//! runs it for several `(s, K)` settings and keeps the best. The remaining
//! functions are baselines and oracles: greedy descent, exhaustive
//! enumeration, and equal-energy truncation.

use std::cmp::Ordering;
use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::compress::{compression_ratio, LayerShape};
use crate::error::{Error, Result};
use crate::linalg::SvdFactors;

mod eval;

pub use eval::{truncated_accuracy, AccuracyOracle, FactorCache, TruncationEvaluator};

/// Per-layer ranks, `1 <= r_l <= min(m_l, n_l)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankVector(Vec<usize>);

impl RankVector {
    pub fn new(ranks: Vec<usize>) -> Self {
        Self(ranks)
    }

    pub fn full(shapes: &[LayerShape]) -> Self {
        Self(shapes.iter().map(LayerShape::full_rank).collect())
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1; len])
    }

    pub fn rank_sum(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    pub fn validate(&self, shapes: &[LayerShape]) -> Result<()> {
        compression_ratio(shapes, self).map(|_| ())
    }
}

impl Deref for RankVector {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl fmt::Display for RankVector {
    /// Semicolon-joined, as used in the trace CSV.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|r| r.to_string()).collect();
        f.write_str(&parts.join(";"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Desired compression ratio `C_d`.
    pub c_d: f64,
    /// Band relaxation: success means `C_d - tau <= C(r) <= C_d`.
    pub tau: f64,
    /// Beam size `K`.
    pub k: usize,
    /// Level step size `s`.
    pub s: usize,
    /// Step shrink factor applied when a level has no admissible child.
    pub gamma: f64,
    /// Seeds the tie-break tags and the validation subset.
    pub seed: u64,
    /// Evaluate on this many validation samples instead of the full split.
    pub val_subset: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            c_d: 0.5,
            tau: 0.02,
            k: 5,
            s: 3,
            gamma: 0.5,
            seed: 0,
            val_subset: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_d > 0.0 && self.c_d < 1.0) {
            return Err(Error::Config(format!("c_d must be in (0, 1), got {}", self.c_d)));
        }
        if self.tau.is_nan() || self.tau < 0.0 || self.c_d - self.tau <= 0.0 {
            return Err(Error::Config(format!("need tau >= 0 and c_d - tau > 0 (tau = {})", self.tau)));
        }
        if self.k == 0 || self.s == 0 {
            return Err(Error::Config("beam size and step size must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn in_band(&self, c: f64) -> bool {
        in_band(c, self.c_d, self.tau)
    }
}

fn in_band(c: f64, c_d: f64, tau: f64) -> bool {
    c_d - tau <= c && c <= c_d
}

/// A scored rank vector: `c` is its compression ratio, `a` its accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamCandidate {
    pub r: RankVector,
    pub c: f64,
    pub a: f64,
}

/// SplitMix64 over the seed and the ranks: a reproducible "random" tag that
/// does not depend on evaluation order.
pub fn tie_tag(seed: u64, r: &RankVector) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    r.iter().fold(mix(seed), |h, &x| mix(h ^ x as u64))
}

/// Beam order: accuracy descending, rank sum ascending, tag ascending, then
/// the ranks themselves so the order is total.
pub fn beam_order(seed: u64, x: &BeamCandidate, y: &BeamCandidate) -> Ordering {
    y.a.total_cmp(&x.a)
        .then(x.r.rank_sum().cmp(&y.r.rank_sum()))
        .then(tie_tag(seed, &x.r).cmp(&tie_tag(seed, &y.r)))
        .then(x.r.cmp(&y.r))
}

/// Children of `r`: one per layer with that rank lowered by `step` (floored
/// at 1). Children identical to the parent are dropped.
pub fn descendants(r: &RankVector, step: usize) -> Vec<RankVector> {
    let mut out = Vec::with_capacity(r.len());
    for i in 0..r.len() {
        let lowered = r[i].saturating_sub(step).max(1);
        if lowered != r[i] {
            let mut child = r.0.clone();
            child[i] = lowered;
            out.push(RankVector(child));
        }
    }
    out
}

/// One evaluated candidate in the search trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub level: usize,
    pub step: usize,
    pub candidate: BeamCandidate,
    pub in_beam: bool,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "level,step_size,candidate_rank_vector,compression_ratio,val_accuracy,in_beam";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.level,
            self.step,
            self.candidate.r,
            self.candidate.c,
            self.candidate.a,
            u8::from(self.in_beam)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// The returned rank vector; on failure the best in-band candidate seen,
    /// or the final beam head if none was.
    pub selected: BeamCandidate,
    pub success: bool,
    pub levels: usize,
    pub evaluations: usize,
    pub trace: Vec<TraceRow>,
}

fn score(oracle: &dyn AccuracyOracle, shapes: &[LayerShape], r: RankVector) -> Result<BeamCandidate> {
    let c = compression_ratio(shapes, &r)?;
    let a = oracle.accuracy(&r)?;
    Ok(BeamCandidate { r, c, a })
}

fn precheck(shapes: &[LayerShape], c_d: f64, tau: f64) -> Result<()> {
    let floor = compression_ratio(shapes, &RankVector::ones(shapes.len()))?;
    if floor < c_d - tau {
        return Err(Error::SearchFailure {
            msg: format!("even all-ones ranks only reach C = {floor:.6} < {:.6}", c_d - tau),
            best: None,
        });
    }
    Ok(())
}

/// Runs the beam search and reports the outcome with a success flag instead
/// of failing. Errors only on invalid input or an unreachable band.
pub fn mbs_run(oracle: &dyn AccuracyOracle, shapes: &[LayerShape], config: &SearchConfig) -> Result<SearchOutcome> {
    config.validate()?;
    precheck(shapes, config.c_d, config.tau)?;
    let seed = config.seed;

    let root = score(oracle, shapes, RankVector::full(shapes))?;
    let mut evaluations = 1;
    let mut trace = vec![TraceRow {
        level: 1,
        step: config.s,
        candidate: root.clone(),
        in_beam: true,
    }];
    let mut beam = vec![root];
    let mut level = 1;
    let mut step = config.s;
    let mut best_in_band: Option<BeamCandidate> = None;

    loop {
        if config.in_band(beam[0].c) {
            return Ok(SearchOutcome {
                selected: beam[0].clone(),
                success: true,
                levels: level,
                evaluations,
                trace,
            });
        }

        let mut children: Vec<RankVector> = beam.iter().flat_map(|p| descendants(&p.r, step)).collect();
        children.sort();
        children.dedup();
        let admissible: Vec<(RankVector, f64)> = children
            .into_iter()
            .map(|r| compression_ratio(shapes, &r).map(|c| (r, c)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|(_, c)| *c <= config.c_d)
            .collect();

        if admissible.is_empty() {
            if step == 1 {
                let selected = best_in_band.unwrap_or_else(|| beam[0].clone());
                return Ok(SearchOutcome {
                    selected,
                    success: false,
                    levels: level,
                    evaluations,
                    trace,
                });
            }
            step = ((config.gamma * step as f64).floor() as usize).max(1);
            log::debug!("level {level}: no admissible child, step -> {step}");
            continue;
        }

        level += 1;
        let mut scored = Vec::with_capacity(admissible.len());
        for (r, c) in admissible {
            let a = oracle.accuracy(&r)?;
            scored.push(BeamCandidate { r, c, a });
        }
        evaluations += scored.len();
        scored.sort_by(|x, y| beam_order(seed, x, y));

        for (rank, cand) in scored.iter().enumerate() {
            if config.in_band(cand.c)
                && best_in_band.as_ref().is_none_or(|b| beam_order(seed, cand, b) == Ordering::Less)
            {
                best_in_band = Some(cand.clone());
            }
            trace.push(TraceRow {
                level,
                step,
                candidate: cand.clone(),
                in_beam: rank < config.k,
            });
        }
        scored.truncate(config.k);
        beam = scored;
    }
}

/// [`mbs_run`] that turns an unsuccessful search into
/// [`Error::SearchFailure`] carrying the best candidate.
pub fn mbs_search(
    oracle: &dyn AccuracyOracle,
    shapes: &[LayerShape],
    config: &SearchConfig,
) -> Result<(RankVector, Vec<TraceRow>)> {
    let out = mbs_run(oracle, shapes, config)?;
    if out.success {
        Ok((out.selected.r, out.trace))
    } else {
        Err(Error::SearchFailure {
            msg: format!(
                "step size 1 reached with no admissible child (k = {}, s = {})",
                config.k, config.s
            ),
            best: Some(Box::new(out.selected)),
        })
    }
}

/// `(s, K)` settings tried by [`multi_config_search`].
pub const DEFAULT_CONFIGS: [(usize, usize); 3] = [(3, 5), (5, 5), (10, 5)];

#[derive(Debug, Clone, PartialEq)]
pub struct MultiOutcome {
    pub best: BeamCandidate,
    /// Index into the config list of the winner.
    pub chosen: usize,
    pub runs: Vec<SearchOutcome>,
}

/// Runs [`mbs_run`] for each `(s, K)` and returns the successful result with
/// the highest accuracy; ties go to the smaller rank sum, then the earlier
/// configuration.
pub fn multi_config_search(
    oracle: &dyn AccuracyOracle,
    shapes: &[LayerShape],
    base: &SearchConfig,
    configs: &[(usize, usize)],
) -> Result<MultiOutcome> {
    let mut runs = Vec::with_capacity(configs.len());
    for &(s, k) in configs {
        let cfg = SearchConfig { s, k, ..base.clone() };
        runs.push(mbs_run(oracle, shapes, &cfg)?);
    }
    let chosen = runs
        .iter()
        .enumerate()
        .filter(|(_, o)| o.success)
        .min_by(|(i, x), (j, y)| {
            y.selected
                .a
                .total_cmp(&x.selected.a)
                .then(x.selected.r.rank_sum().cmp(&y.selected.r.rank_sum()))
                .then(i.cmp(j))
        })
        .map(|(i, _)| i);
    match chosen {
        Some(i) => Ok(MultiOutcome {
            best: runs[i].selected.clone(),
            chosen: i,
            runs,
        }),
        None => Err(Error::SearchFailure {
            msg: format!("all {} configurations failed", configs.len()),
            best: runs
                .iter()
                .map(|o| &o.selected)
                .min_by(|x, y| beam_order(base.seed, x, y))
                .cloned()
                .map(Box::new),
        }),
    }
}

/// Greedy descent: from full rank, repeatedly take the best admissible
/// single-layer decrement of `step` until the band is reached. Returns the
/// chain of accepted candidates, starting with the full-rank root.
pub fn greedy_search(
    oracle: &dyn AccuracyOracle,
    shapes: &[LayerShape],
    c_d: f64,
    tau: f64,
    step: usize,
    seed: u64,
) -> Result<Vec<BeamCandidate>> {
    precheck(shapes, c_d, tau)?;
    let mut path = vec![score(oracle, shapes, RankVector::full(shapes))?];
    loop {
        let current = path.last().expect("non-empty");
        if in_band(current.c, c_d, tau) {
            return Ok(path);
        }
        let mut best: Option<BeamCandidate> = None;
        for child in descendants(&current.r, step) {
            if compression_ratio(shapes, &child)? > c_d {
                continue;
            }
            let cand = score(oracle, shapes, child)?;
            if best.as_ref().is_none_or(|b| beam_order(seed, &cand, b) == Ordering::Less) {
                best = Some(cand);
            }
        }
        match best {
            Some(b) => path.push(b),
            None => {
                return Err(Error::SearchFailure {
                    msg: "greedy descent stuck below the band".into(),
                    best: path.pop().map(Box::new),
                })
            }
        }
    }
}

/// Exhaustive argmax of accuracy over the grid's in-band rank vectors. Ties
/// go to the smaller rank sum, then the lexicographically smaller vector.
pub fn brute_force_best(
    oracle: &dyn AccuracyOracle,
    shapes: &[LayerShape],
    c_d: f64,
    tau: f64,
    grid: &[Vec<usize>],
) -> Result<BeamCandidate> {
    if grid.len() != shapes.len() || grid.iter().any(Vec::is_empty) {
        return Err(Error::invalid("grid must list at least one rank per layer"));
    }
    let size = grid.iter().try_fold(1usize, |acc, g| acc.checked_mul(g.len()));
    if size.is_none_or(|n| n > 1_000_000) {
        return Err(Error::invalid("grid larger than 10^6 vectors"));
    }

    let mut best: Option<BeamCandidate> = None;
    let mut cursor = vec![0usize; grid.len()];
    loop {
        let r = RankVector(cursor.iter().zip(grid).map(|(&i, g)| g[i]).collect());
        let c = compression_ratio(shapes, &r)?;
        if in_band(c, c_d, tau) {
            let a = oracle.accuracy(&r)?;
            let better = match &best {
                None => true,
                Some(b) => a
                    .total_cmp(&b.a)
                    .then(b.r.rank_sum().cmp(&r.rank_sum()))
                    .then(b.r.cmp(&r))
                    == Ordering::Greater,
            };
            if better {
                best = Some(BeamCandidate { r, c, a });
            }
        }
        // Odometer increment.
        let mut pos = grid.len();
        loop {
            if pos == 0 {
                return best.ok_or_else(|| Error::SearchFailure {
                    msg: "no grid vector lies in the band".into(),
                    best: None,
                });
            }
            pos -= 1;
            cursor[pos] += 1;
            if cursor[pos] < grid[pos].len() {
                break;
            }
            cursor[pos] = 0;
        }
    }
}

/// Smallest rank per layer keeping at least fraction `energy` of the squared
/// singular values.
pub fn ranks_for_energy(factors: &[SvdFactors], energy: f64) -> RankVector {
    RankVector(
        factors
            .iter()
            .map(|f| {
                let total: f64 = f.sigma.iter().map(|s| s * s).sum();
                if total <= 0.0 {
                    return 1;
                }
                let mut cum = 0.0;
                for (i, s) in f.sigma.iter().enumerate() {
                    cum += s * s;
                    if cum / total >= energy {
                        return i + 1;
                    }
                }
                f.rank()
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyOutcome {
    pub r: RankVector,
    pub energy: f64,
    pub c: f64,
    /// False when no energy fraction lands in the band; `r` is then the
    /// closest one found.
    pub in_band: bool,
}

/// Equal-energy baseline: bisects the kept energy fraction until the
/// resulting ratio lands in `[c_d - tau, c_d]`.
pub fn energy_baseline(factors: &[SvdFactors], shapes: &[LayerShape], c_d: f64, tau: f64) -> Result<EnergyOutcome> {
    if factors.len() != shapes.len() {
        return Err(Error::invalid("factor cache does not match shapes"));
    }
    let eval = |e: f64| -> Result<EnergyOutcome> {
        let r = ranks_for_energy(factors, e);
        let c = compression_ratio(shapes, &r)?;
        Ok(EnergyOutcome {
            in_band: in_band(c, c_d, tau),
            r,
            energy: e,
            c,
        })
    };
    let distance = |c: f64| {
        if c > c_d {
            c - c_d
        } else if c < c_d - tau {
            c_d - tau - c
        } else {
            0.0
        }
    };

    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut nearest = eval(hi)?;
    for e in [lo, hi] {
        let o = eval(e)?;
        if o.in_band {
            return Ok(o);
        }
        if distance(o.c) < distance(nearest.c) {
            nearest = o;
        }
    }
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        let o = eval(mid)?;
        if o.in_band {
            return Ok(o);
        }
        // Ratio falls as the kept energy rises.
        if o.c > c_d {
            lo = mid;
        } else {
            hi = mid;
        }
        if distance(o.c) < distance(nearest.c) {
            nearest = o;
        }
    }
    Ok(nearest)
}

#[cfg(test)]
mod tests;
