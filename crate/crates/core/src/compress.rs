//! Compression-ratio arithmetic, FLOPs accounting, and factorization of a
//! dense model into rank-`r` cascades.
//!
//! A layer with weight `W` (`m x n`) truncated to rank `r` costs `r (m + n)`
//! parameters as a cascade. When that is not smaller than `m n` the layer
//! stays dense; [`keeps_dense`] is that indicator. Biases never enter the
//! ratio.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{svd_full, truncate};
use crate::nn::{self, DenseLayer, EpochLog, FactorizedLayer, Layer, Model, TrainConfig};
use crate::ranksel::RankVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv,
}

/// Structural description of one layer. For convolutions `n` is
/// `C_in * k_h * k_w` and `spatial_count` is `H_out * W_out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub m: usize,
    pub n: usize,
    pub spatial_count: usize,
    pub has_bias: bool,
}

impl LayerShape {
    pub fn dense(m: usize, n: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            m,
            n,
            spatial_count: 1,
            has_bias: true,
        }
    }

    pub fn conv(c_out: usize, c_in: usize, kh: usize, kw: usize, spatial: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            m: c_out,
            n: c_in * kh * kw,
            spatial_count: spatial,
            has_bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn full_rank(&self) -> usize {
        self.m.min(self.n)
    }

    pub fn params(&self) -> usize {
        self.m * self.n
    }

    fn check(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.spatial_count == 0 {
            return Err(Error::invalid(format!("degenerate layer shape {self:?}")));
        }
        if self.kind == LayerKind::Dense && self.spatial_count != 1 {
            return Err(Error::invalid("dense layers have spatial_count 1"));
        }
        Ok(())
    }
}

/// Shapes of every layer in `model`, taking the original `m x n` for cascades.
pub fn shapes_of(model: &Model) -> Vec<LayerShape> {
    model
        .layers
        .iter()
        .map(|l| LayerShape::dense(l.out_dim(), l.in_dim()))
        .collect()
}

/// True when factorizing at rank `r` would not save parameters.
pub fn keeps_dense(shape: &LayerShape, r: usize) -> bool {
    shape.m * shape.n <= r * (shape.m + shape.n)
}

fn check_ranks(shapes: &[LayerShape], r: &RankVector) -> Result<()> {
    if shapes.len() != r.len() {
        return Err(Error::invalid(format!(
            "{} ranks for {} layers",
            r.len(),
            shapes.len()
        )));
    }
    for (i, (s, &rank)) in shapes.iter().zip(r.iter()).enumerate() {
        s.check()?;
        if rank == 0 || rank > s.full_rank() {
            return Err(Error::invalid(format!(
                "layer {i}: rank {rank} outside 1..={}",
                s.full_rank()
            )));
        }
    }
    Ok(())
}

/// Weight parameters after compressing at `r`.
pub fn params_after(shapes: &[LayerShape], r: &RankVector) -> Result<usize> {
    check_ranks(shapes, r)?;
    Ok(shapes
        .iter()
        .zip(r.iter())
        .map(|(s, &rank)| if keeps_dense(s, rank) { s.params() } else { rank * (s.m + s.n) })
        .sum())
}

/// `1 - sum_l [m n 1_l + r (m + n)(1 - 1_l)] / sum_l m n`.
pub fn compression_ratio(shapes: &[LayerShape], r: &RankVector) -> Result<f64> {
    let after = params_after(shapes, r)?;
    let before: usize = shapes.iter().map(LayerShape::params).sum();
    Ok(1.0 - after as f64 / before as f64)
}

/// How a multiply-add without bias is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FlopsConvention {
    /// `m (n - 1)` for a bias-free product.
    #[default]
    Exact,
    /// `m n` for a bias-free product.
    Fused,
}

fn product_flops(m: usize, n: usize, conv: FlopsConvention) -> u64 {
    let (m, n) = (m as u64, n as u64);
    match conv {
        FlopsConvention::Exact => m * (n - 1),
        FlopsConvention::Fused => m * n,
    }
}

/// Fully-connected FLOPs: `m n` with bias, `m (n - 1)` (exact) without.
pub fn flops_fc(shape: &LayerShape, conv: FlopsConvention) -> Result<u64> {
    if shape.kind != LayerKind::Dense {
        return Err(Error::invalid("flops_fc on a conv layer"));
    }
    shape.check()?;
    Ok(if shape.has_bias {
        (shape.m * shape.n) as u64
    } else {
        product_flops(shape.m, shape.n, conv)
    })
}

/// Convolution FLOPs: the bias-free product applied `M` times, plus one
/// bias add per output map.
pub fn flops_conv(shape: &LayerShape, conv: FlopsConvention) -> Result<u64> {
    if shape.kind != LayerKind::Conv {
        return Err(Error::invalid("flops_conv on a dense layer"));
    }
    shape.check()?;
    let bias = if shape.has_bias { shape.m as u64 } else { 0 };
    Ok(product_flops(shape.m, shape.n, conv) * shape.spatial_count as u64 + bias)
}

fn layer_flops(shape: &LayerShape, conv: FlopsConvention) -> Result<u64> {
    match shape.kind {
        LayerKind::Dense => flops_fc(shape, conv),
        LayerKind::Conv => flops_conv(shape, conv),
    }
}

/// Total forward FLOPs. With `r`, every layer that gets factorized counts as
/// a bias-free `r x n` stage followed by an `m x r` stage carrying the bias.
/// Nonlinearities, copies and (fused) batch-norm are free.
pub fn model_flops(shapes: &[LayerShape], r: Option<&RankVector>, conv: FlopsConvention) -> Result<u64> {
    if let Some(r) = r {
        check_ranks(shapes, r)?;
    }
    let mut total = 0;
    for (i, s) in shapes.iter().enumerate() {
        match r.map(|r| r[i]) {
            Some(rank) if !keeps_dense(s, rank) => {
                let first = LayerShape {
                    m: rank,
                    has_bias: false,
                    ..*s
                };
                let second = LayerShape { n: rank, ..*s };
                total += layer_flops(&first, conv)? + layer_flops(&second, conv)?;
            }
            _ => total += layer_flops(s, conv)?,
        }
    }
    Ok(total)
}

/// Replaces each layer by its rank-`r_l` truncation. Layers where the
/// cascade would not save parameters stay dense, holding the rank-`r_l`
/// reconstruction (the original weights when `r_l` is full). Biases are
/// copied unchanged.
pub fn factorize_model(model: &Model, r: &RankVector) -> Result<Model> {
    let shapes = shapes_of(model);
    check_ranks(&shapes, r)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, (layer, shape)) in model.layers.iter().zip(&shapes).enumerate() {
        let Layer::Dense(d) = layer else {
            return Err(Error::invalid(format!("layer {i} is already factorized")));
        };
        let rank = r[i];
        if rank == shape.full_rank() && keeps_dense(shape, rank) {
            layers.push(layer.clone());
            continue;
        }
        let t = truncate(&svd_full(&d.w)?, rank)?;
        if keeps_dense(shape, rank) {
            layers.push(Layer::Dense(DenseLayer {
                w: t.reconstruct(),
                bias: d.bias.clone(),
                activation: d.activation,
            }));
        } else {
            let mut a = t.v.t().as_standard_layout().into_owned();
            for (mut row, s) in a.axis_iter_mut(Axis(0)).zip(t.s.iter()) {
                row *= *s;
            }
            layers.push(Layer::Factorized(FactorizedLayer {
                a,
                b: t.u.as_standard_layout().into_owned(),
                bias: d.bias.clone(),
                activation: d.activation,
            }));
        }
    }
    Model::new(layers, model.classes)
}

/// Trains a (possibly factorized) model in place; cascade factors are
/// independent parameters and the structure is kept.
pub fn finetune(model: &mut Model, ds: &Dataset, config: &TrainConfig) -> Result<Vec<EpochLog>> {
    nn::train(model, ds, config, None)
}

pub const REPORT_BITS: [u32; 4] = [32, 16, 8, 4];

/// Weight memory in megabytes (10^6 bytes) per bit-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryMb {
    pub bits32: f64,
    pub bits16: f64,
    pub bits8: f64,
    pub bits4: f64,
}

impl MemoryMb {
    pub fn for_params(params: usize) -> Self {
        let mb = |bits: u32| params as f64 * bits as f64 / 8.0 / 1e6;
        Self {
            bits32: mb(32),
            bits16: mb(16),
            bits8: mb(8),
            bits4: mb(4),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.bits32, self.bits16, self.bits8, self.bits4]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub ranks: Vec<usize>,
    pub params_before: usize,
    pub params_after: usize,
    pub ratio: f64,
    pub flops_before: u64,
    pub flops_after_exact: u64,
    pub flops_after_fused: u64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub memory_mb: MemoryMb,
}

impl CompressionReport {
    pub const CSV_HEADER: &'static str = "c_d,tau,ratio,params_before,params_after,mflops_before,mflops_after_exact,mflops_after_fused,acc_before,acc_after,mem32,mem16,mem8,mem4";

    pub fn new(shapes: &[LayerShape], r: &RankVector, accuracy_before: f64, accuracy_after: f64) -> Result<Self> {
        let params_after = params_after(shapes, r)?;
        Ok(Self {
            ranks: r.to_vec(),
            params_before: shapes.iter().map(LayerShape::params).sum(),
            params_after,
            ratio: compression_ratio(shapes, r)?,
            flops_before: model_flops(shapes, None, FlopsConvention::Exact)?,
            flops_after_exact: model_flops(shapes, Some(r), FlopsConvention::Exact)?,
            flops_after_fused: model_flops(shapes, Some(r), FlopsConvention::Fused)?,
            accuracy_before,
            accuracy_after,
            memory_mb: MemoryMb::for_params(params_after),
        })
    }

    pub fn csv_row(&self, c_d: f64, tau: f64) -> String {
        let m = self.memory_mb;
        format!(
            "{c_d},{tau},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.ratio,
            self.params_before,
            self.params_after,
            self.flops_before as f64 / 1e6,
            self.flops_after_exact as f64 / 1e6,
            self.flops_after_fused as f64 / 1e6,
            self.accuracy_before,
            self.accuracy_after,
            m.bits32,
            m.bits16,
            m.bits8,
            m.bits4
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::testutil::random_matrix;
    use proptest::prelude::*;

    fn rv(v: &[usize]) -> RankVector {
        RankVector::new(v.to_vec())
    }

    #[test]
    fn ratio_examples() {
        let big = LayerShape::dense(100, 100);
        let small = LayerShape::dense(10, 10);
        assert!((compression_ratio(&[big], &rv(&[10])).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(compression_ratio(&[small], &rv(&[6])).unwrap(), 0.0);
        assert_eq!(compression_ratio(&[big, small], &rv(&[100, 10])).unwrap(), 0.0);
        let two = compression_ratio(&[big, small], &rv(&[10, 6])).unwrap();
        assert!((two - (1.0 - 2100.0 / 10100.0)).abs() < 1e-12);
    }

    #[test]
    fn ratio_rejects_bad_ranks() {
        let s = [LayerShape::dense(4, 6)];
        assert!(compression_ratio(&s, &rv(&[0])).is_err());
        assert!(compression_ratio(&s, &rv(&[5])).is_err());
        assert!(compression_ratio(&s, &rv(&[1, 1])).is_err());
    }

    #[test]
    fn flops_fixtures() {
        let fc = LayerShape::dense(10, 20);
        assert_eq!(flops_fc(&fc, FlopsConvention::Exact).unwrap(), 200);
        assert_eq!(flops_fc(&fc.without_bias(), FlopsConvention::Exact).unwrap(), 190);
        assert_eq!(flops_fc(&fc.without_bias(), FlopsConvention::Fused).unwrap(), 200);

        let conv = LayerShape::conv(16, 3, 3, 3, 100);
        assert_eq!(flops_conv(&conv, FlopsConvention::Exact).unwrap(), 41616);
        let one = LayerShape::conv(16, 3, 3, 3, 1);
        assert_eq!(flops_conv(&one, FlopsConvention::Exact).unwrap(), 16 * 27);
        assert_eq!(flops_conv(&conv.without_bias(), FlopsConvention::Exact).unwrap(), 16 * 26 * 100);
        assert!(flops_conv(&fc, FlopsConvention::Exact).is_err());
        assert!(flops_fc(&conv, FlopsConvention::Exact).is_err());

        let d = [LayerShape::dense(100, 100)];
        assert_eq!(model_flops(&d, None, FlopsConvention::Exact).unwrap(), 10000);
        assert_eq!(model_flops(&d, Some(&rv(&[10])), FlopsConvention::Exact).unwrap(), 1990);
        assert_eq!(model_flops(&d, Some(&rv(&[10])), FlopsConvention::Fused).unwrap(), 2000);
        assert_eq!(model_flops(&d, Some(&rv(&[100])), FlopsConvention::Exact).unwrap(), 10000);
    }

    #[test]
    fn indicator_layer_stays_dense() {
        let mut model = Model::mlp(&[10, 10, 3], 0).unwrap();
        model.layers[0].weights_mut()[0].assign(&random_matrix(10, 10, 1));
        let out = factorize_model(&model, &rv(&[6, 3])).unwrap();
        assert!(matches!(out.layers[0], Layer::Dense(_)));
        let out = factorize_model(&model, &rv(&[4, 3])).unwrap();
        assert_eq!(out.layers[0].rank(), Some(4));
    }

    #[test]
    fn full_rank_factorization_is_lossless() {
        let model = Model::mlp(&[12, 9, 4], 3).unwrap();
        let out = factorize_model(&model, &rv(&[9, 4])).unwrap();
        let x = random_matrix(5, 12, 2);
        let d = &out.forward(&x).unwrap() - &model.forward(&x).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn rank_one_layer_matches_explicit_reconstruction() {
        let model = Model::mlp(&[8, 6], 4).unwrap();
        let w = model.layers[0].effective_weight();
        let f = svd_full(&w).unwrap();
        let u1 = f.u.column(0).to_owned();
        let v1 = f.v.column(0).to_owned();
        let x = random_matrix(3, 8, 5);
        let out = factorize_model(&model, &rv(&[1])).unwrap();
        let got = out.forward(&x).unwrap();
        for i in 0..3 {
            let proj = x.row(i).dot(&v1) * f.sigma[0];
            for j in 0..6 {
                assert!((got[[i, j]] - proj * u1[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn finetuning_keeps_the_cascade() {
        use crate::dataio::{split, synth_blobs};
        let ds = split(synth_blobs(3, 30, 10, 1).unwrap(), [0.6, 0.2, 0.2], 1).unwrap();
        let model = Model::mlp(&[10, 8, 3], 2).unwrap();
        let mut out = factorize_model(&model, &rv(&[2, 3])).unwrap();
        let cfg = TrainConfig { epochs: 2, batch: 8, ..TrainConfig::default() };
        finetune(&mut out, &ds, &cfg).unwrap();
        assert_eq!(out.layers[0].rank(), Some(2));
        assert_ne!(out.layers[0].weights()[0], factorize_model(&model, &rv(&[2, 3])).unwrap().layers[0].weights()[0]);
    }

    #[test]
    fn report_memory_halves() {
        let shapes = [LayerShape::dense(100, 100), LayerShape::dense(10, 100)];
        let rep = CompressionReport::new(&shapes, &rv(&[10, 10]), 0.9, 0.8).unwrap();
        let m = rep.memory_mb.as_array();
        for w in m.windows(2) {
            assert_eq!(w[1] * 2.0, w[0]);
        }
        assert_eq!(rep.params_after, 2000 + 1000);
        assert_eq!(rep.csv_row(0.5, 0.02).split(',').count(), CompressionReport::CSV_HEADER.split(',').count());
    }

    proptest! {
        #[test]
        fn ratio_monotone_while_factorized(m in 2usize..60, n in 2usize..60, r in 1usize..30) {
            let s = [LayerShape::dense(m, n)];
            let full = m.min(n);
            prop_assume!(r < full);
            let hi = rv(&[r + 1]);
            let lo = rv(&[r]);
            if !keeps_dense(&s[0], r + 1) {
                prop_assert!(compression_ratio(&s, &lo).unwrap() >= compression_ratio(&s, &hi).unwrap());
                let before = model_flops(&s, None, FlopsConvention::Exact).unwrap();
                prop_assert!(model_flops(&s, Some(&lo), FlopsConvention::Exact).unwrap() <= before);
            }
            prop_assert_eq!(compression_ratio(&s, &rv(&[full])).unwrap(), 0.0);
        }
    }
}
