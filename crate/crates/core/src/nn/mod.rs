//! Minimal dense-network engine: layers, forward/backward passes, and the
//! softmax cross-entropy loss.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, SplitKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

mod train;

pub use train::{cosine_lr, train, EpochLog, LrSchedule, Penalty, StepInfo, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `m x n`: maps `n` inputs to `m` outputs.
    pub w: Matrix,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// `y = b (a x) + bias`, the cascade replacing a dense `m x n` layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedLayer {
    /// `r x n`, holds `S V^T`.
    pub a: Matrix,
    /// `m x r`, holds `U`.
    pub b: Matrix,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Factorized(FactorizedLayer),
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.w.ncols(),
            Layer::Factorized(f) => f.a.ncols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.w.nrows(),
            Layer::Factorized(f) => f.b.nrows(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Dense(d) => d.activation,
            Layer::Factorized(f) => f.activation,
        }
    }

    pub fn bias(&self) -> &Array1<f64> {
        match self {
            Layer::Dense(d) => &d.bias,
            Layer::Factorized(f) => &f.bias,
        }
    }

    /// Inner rank for factorized layers.
    pub fn rank(&self) -> Option<usize> {
        match self {
            Layer::Dense(_) => None,
            Layer::Factorized(f) => Some(f.a.nrows()),
        }
    }

    /// Weight matrices in optimizer order: `[w]` or `[a, b]`.
    pub fn weights(&self) -> Vec<&Matrix> {
        match self {
            Layer::Dense(d) => vec![&d.w],
            Layer::Factorized(f) => vec![&f.a, &f.b],
        }
    }

    pub fn weights_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Layer::Dense(d) => vec![&mut d.w],
            Layer::Factorized(f) => vec![&mut f.a, &mut f.b],
        }
    }

    pub fn bias_mut(&mut self) -> &mut Array1<f64> {
        match self {
            Layer::Dense(d) => &mut d.bias,
            Layer::Factorized(f) => &mut f.bias,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weights().iter().map(|w| w.len()).sum()
    }

    /// The `m x n` map this layer applies (product of the cascade if factorized).
    pub fn effective_weight(&self) -> Matrix {
        match self {
            Layer::Dense(d) => d.w.clone(),
            Layer::Factorized(f) => f.b.dot(&f.a),
        }
    }

    fn pre_activation(&self, x: &Matrix) -> Matrix {
        let mut z = match self {
            Layer::Dense(d) => x.dot(&d.w.t()),
            Layer::Factorized(f) => x.dot(&f.a.t()).dot(&f.b.t()),
        };
        z += self.bias();
        z
    }
}

/// Parameter-shaped gradient (or momentum buffer) for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    /// Same order as [`Layer::weights`].
    pub weights: Vec<Matrix>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &Layer) -> Self {
        Self {
            weights: layer.weights().iter().map(|w| Array2::zeros(w.dim())).collect(),
            bias: Array1::zeros(layer.bias().len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub classes: usize,
}

impl Model {
    /// ReLU MLP with He-uniform weights and zero biases. `dims` lists the
    /// input width, hidden widths and class count.
    pub fn mlp(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad architecture {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (n, m) = (pair[0], pair[1]);
                let bound = (6.0 / n as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Layer::Dense(DenseLayer {
                    w: Array2::from_shape_simple_fn((m, n), || dist.sample(&mut rng)),
                    bias: Array1::zeros(m),
                    activation: if i == last { Activation::None } else { Activation::Relu },
                })
            })
            .collect();
        Self::new(layers, dims[dims.len() - 1])
    }

    pub fn new(layers: Vec<Layer>, classes: usize) -> Result<Self> {
        let model = Self { layers, classes };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::invalid("model has no layers"));
        };
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::invalid(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if last.out_dim() != self.classes {
            return Err(Error::invalid(format!(
                "final width {} != class count {}",
                last.out_dim(),
                self.classes
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Factorized(f) = layer {
                let r = f.a.nrows();
                if f.b.ncols() != r || r > f.a.ncols().min(f.b.nrows()) {
                    return Err(Error::invalid(format!("layer {i}: inconsistent cascade rank")));
                }
            }
            if layer.bias().len() != layer.out_dim() {
                return Err(Error::invalid(format!("layer {i}: bias length mismatch")));
            }
            let finite = layer.weights().iter().all(|w| w.iter().all(|x| x.is_finite()))
                && layer.bias().iter().all(|x| x.is_finite());
            if !finite {
                return Err(Error::invalid(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Rounds every parameter through `f32`, matching what a checkpoint holds.
    pub fn round_to_f32(&mut self) {
        for layer in &mut self.layers {
            for w in layer.weights_mut() {
                w.mapv_inplace(|x| x as f32 as f64);
            }
            layer.bias_mut().mapv_inplace(|x| x as f32 as f64);
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input width {} != model input {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.pre_activation(&h);
            if layer.activation() == Activation::Relu {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Mean softmax cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, x: &Matrix, y: &[usize]) -> Result<(f64, Vec<LayerGrad>)> {
        if x.ncols() != self.input_dim() || x.nrows() != y.len() || y.is_empty() {
            return Err(Error::invalid("batch shape does not match model"));
        }
        if let Some(bad) = y.iter().find(|&&c| c >= self.classes) {
            return Err(Error::invalid(format!("label {bad} out of range")));
        }

        // Inputs to each layer, plus the last pre-activation.
        let mut inputs: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        let mut pre: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layer.pre_activation(&h);
            inputs.push(h);
            h = if layer.activation() == Activation::Relu {
                z.mapv(|v| v.max(0.0))
            } else {
                z.clone()
            };
            pre.push(z);
        }

        let (loss, mut delta) = softmax_xent(&h, y);

        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation() == Activation::Relu {
                ndarray::Zip::from(&mut delta)
                    .and(&pre[li])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            let input = &inputs[li];
            let bias = delta.sum_axis(Axis(0));
            let (weights, next_delta) = match layer {
                Layer::Dense(d) => {
                    let gw = delta.t().dot(input);
                    let nd = (li > 0).then(|| delta.dot(&d.w));
                    (vec![gw], nd)
                }
                Layer::Factorized(f) => {
                    let inner = input.dot(&f.a.t());
                    let gb = delta.t().dot(&inner);
                    let dinner = delta.dot(&f.b);
                    let ga = dinner.t().dot(input);
                    let nd = (li > 0).then(|| dinner.dot(&f.a));
                    (vec![ga, gb], nd)
                }
            };
            grads.push(LayerGrad { weights, bias });
            if let Some(nd) = next_delta {
                delta = nd;
            }
        }
        grads.reverse();
        Ok((loss, grads))
    }

    /// Argmax predictions; ties go to the lowest class index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok(argmax_rows(&logits))
    }
}

pub(crate) fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Returns the mean loss and `(softmax - onehot) / B`.
fn softmax_xent(logits: &Matrix, y: &[usize]) -> (f64, Matrix) {
    let b = logits.nrows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &label) in grad.axis_iter_mut(Axis(0)).zip(y) {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        loss += sum.ln() - (row[label].ln());
        row.mapv_inplace(|v| v / sum);
        row[label] -= 1.0;
        row.mapv_inplace(|v| v / b);
    }
    (loss / b, grad)
}

const EVAL_CHUNK: usize = 2048;

/// Fraction of argmax-correct predictions on one split.
pub fn evaluate_accuracy(model: &Model, ds: &Dataset, split: SplitKind) -> Result<f64> {
    let idx = ds.split_indices(split)?;
    accuracy_on(model, ds, idx)
}

pub fn accuracy_on(model: &Model, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::invalid("accuracy on an empty split"));
    }
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.gather(chunk);
        let pred = model.predict(&x)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / idx.len() as f64)
}
