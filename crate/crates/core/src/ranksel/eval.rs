use std::collections::HashMap;
use std::sync::Mutex;

use ndarray::{s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RankVector;
use crate::dataio::{Dataset, SplitKind};
use crate::error::{Error, Result};
use crate::linalg::{svd_full, Matrix, SvdFactors};
use crate::nn::{argmax_rows, Activation, Layer, Model};

/// Scores a rank vector. Implementations must be pure functions of `r`.
pub trait AccuracyOracle {
    fn accuracy(&self, r: &RankVector) -> Result<f64>;
}

impl<F> AccuracyOracle for F
where
    F: Fn(&RankVector) -> Result<f64>,
{
    fn accuracy(&self, r: &RankVector) -> Result<f64> {
        self(r)
    }
}

/// Per-layer SVDs of a frozen dense model, computed once.
#[derive(Debug, Clone)]
pub struct FactorCache {
    pub factors: Vec<SvdFactors>,
}

impl FactorCache {
    pub fn new(model: &Model) -> Result<Self> {
        let factors = model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                Layer::Dense(d) => svd_full(&d.w),
                Layer::Factorized(_) => Err(Error::invalid(format!("layer {i} is factorized"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { factors })
    }

    pub fn full_ranks(&self) -> RankVector {
        RankVector::new(self.factors.iter().map(SvdFactors::rank).collect())
    }
}

/// Validation accuracy of the base model with each layer replaced by its
/// rank-`r_l` truncation. The base model is never modified.
///
/// The first layer's input projection onto its right singular vectors is
/// computed once, so each evaluation only pays for the leading `r_0` columns.
/// Results are memoized by rank vector.
pub struct TruncationEvaluator<'a> {
    model: &'a Model,
    cache: &'a FactorCache,
    x: Matrix,
    y: Vec<usize>,
    first_proj: Matrix,
    memo: Mutex<HashMap<RankVector, f64>>,
}

impl<'a> TruncationEvaluator<'a> {
    /// Evaluates on `split`, optionally on a seeded subset of `subset` samples.
    pub fn new(
        model: &'a Model,
        cache: &'a FactorCache,
        ds: &Dataset,
        split: SplitKind,
        subset: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        if cache.factors.len() != model.layers.len() {
            return Err(Error::invalid("factor cache does not match model"));
        }
        let mut idx = ds.split_indices(split)?.to_vec();
        if idx.is_empty() {
            return Err(Error::invalid("empty evaluation split"));
        }
        if let Some(k) = subset.filter(|&k| k < idx.len()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, idx.len(), k)
                .into_iter()
                .map(|j| idx[j])
                .collect();
            picked.sort_unstable();
            idx = picked;
        }
        let (x, y) = ds.gather(&idx);
        if x.ncols() != model.input_dim() {
            return Err(Error::invalid("dataset width does not match model"));
        }
        let first_proj = x.dot(&cache.factors[0].v);
        Ok(Self {
            model,
            cache,
            x,
            y,
            first_proj,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn samples(&self) -> usize {
        self.y.len()
    }

    fn check(&self, r: &RankVector) -> Result<()> {
        if r.len() != self.cache.factors.len() {
            return Err(Error::invalid(format!("{} ranks for {} layers", r.len(), self.cache.factors.len())));
        }
        for (i, (&rank, f)) in r.iter().zip(&self.cache.factors).enumerate() {
            if rank == 0 || rank > f.rank() {
                return Err(Error::invalid(format!("layer {i}: rank {rank} outside 1..={}", f.rank())));
            }
        }
        Ok(())
    }

    fn logits(&self, r: &RankVector) -> Matrix {
        let mut h: Option<Matrix> = None;
        for (li, layer) in self.model.layers.iter().enumerate() {
            let f = &self.cache.factors[li];
            let rank = r[li];
            let input = h.as_ref().unwrap_or(&self.x);
            let mut z = if rank == f.rank() {
                input.dot(&layer.effective_weight().t())
            } else {
                let mut proj = if li == 0 {
                    self.first_proj.slice(s![.., ..rank]).to_owned()
                } else {
                    input.dot(&f.v.slice(s![.., ..rank]))
                };
                for (mut col, sv) in proj.axis_iter_mut(Axis(1)).zip(f.sigma.iter()) {
                    col *= *sv;
                }
                proj.dot(&f.u.slice(s![.., ..rank]).t())
            };
            z += layer.bias();
            if layer.activation() == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = Some(z);
        }
        h.expect("model has layers")
    }
}

impl AccuracyOracle for TruncationEvaluator<'_> {
    fn accuracy(&self, r: &RankVector) -> Result<f64> {
        self.check(r)?;
        if let Some(&a) = self.memo.lock().expect("memo lock").get(r) {
            return Ok(a);
        }
        let pred = argmax_rows(&self.logits(r));
        let correct = pred.iter().zip(&self.y).filter(|(p, t)| p == t).count();
        let a = correct as f64 / self.y.len() as f64;
        self.memo.lock().expect("memo lock").insert(r.clone(), a);
        Ok(a)
    }
}

/// One-shot convenience over [`TruncationEvaluator`].
pub fn truncated_accuracy(
    model: &Model,
    cache: &FactorCache,
    r: &RankVector,
    ds: &Dataset,
    split: SplitKind,
) -> Result<f64> {
    TruncationEvaluator::new(model, cache, ds, split, None, 0)?.accuracy(r)
}
