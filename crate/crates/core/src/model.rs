//! Small ReLU MLP classifiers over a flat parameter vector.
//!
//! Parameters are laid out layer by layer; each layer stores its weight
//! matrix `[fan_in × fan_out]` row-major followed by its bias `[fan_out]`.
//! The layout is a pure function of [`MlpConfig`], so any two models built
//! from the same config have coordinate-wise comparable vectors.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::{rng_from, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl LayerLayout {
    /// All coordinates owned by this layer.
    pub fn span(&self) -> Range<usize> {
        self.weight.start..self.bias.end
    }
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let c = MlpConfig { input_dim, hidden_dims, num_classes };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.num_classes);
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weight = offset..offset + fan_in * fan_out;
                let bias = weight.end..weight.end + fan_out;
                offset = bias.end;
                LayerLayout { fan_in, fan_out, weight, bias }
            })
            .collect()
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.layout().last().map(|l| l.bias.end).unwrap_or(0)
    }

    /// Coordinates of the last `n_layers` layers (the classifier head).
    pub fn head_range(&self, n_layers: usize) -> Range<usize> {
        let layout = self.layout();
        let n = n_layers.min(layout.len());
        let start = layout[layout.len() - n].weight.start;
        start..self.param_count()
    }
}

/// Flat vector of every model parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatParams(Vec<f64>);

impl FlatParams {
    pub fn new(values: Vec<f64>) -> Self {
        FlatParams(values)
    }

    pub fn zeros(n: usize) -> Self {
        FlatParams(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self − other`, coordinate-wise.
    pub fn delta_from(&self, other: &FlatParams) -> Result<Vec<f64>> {
        if self.len() != other.len() {
            return Err(Error::dim(format!("parameter lengths {} vs {}", self.len(), other.len())));
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self + delta`, coordinate-wise.
    pub fn apply_delta(&self, delta: &[f64]) -> Result<FlatParams> {
        if self.len() != delta.len() {
            return Err(Error::dim(format!("parameter length {} vs update {}", self.len(), delta.len())));
        }
        Ok(FlatParams(self.0.iter().zip(delta).map(|(a, d)| a + d).collect()))
    }

    pub fn distance(&self, other: &FlatParams) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// Hex SHA-256 of the little-endian bytes, for golden-run comparisons.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.0 {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-layer `(weight [fan_in×fan_out], bias [fan_out])` tensors.
pub fn unflatten(params: &FlatParams, config: &MlpConfig) -> Result<Vec<(Tensor, Tensor)>> {
    if params.len() != config.param_count() {
        return Err(Error::dim(format!(
            "config needs {} parameters, got {}",
            config.param_count(),
            params.len()
        )));
    }
    config
        .layout()
        .into_iter()
        .map(|l| {
            Ok((
                Tensor::matrix(l.fan_in, l.fan_out, params.0[l.weight.clone()].to_vec())?,
                Tensor::vector(params.0[l.bias.clone()].to_vec())?,
            ))
        })
        .collect()
}

pub fn flatten(layers: &[(Tensor, Tensor)]) -> FlatParams {
    let mut v = Vec::new();
    for (w, b) in layers {
        v.extend_from_slice(w.data());
        v.extend_from_slice(b.data());
    }
    FlatParams(v)
}

/// Weights uniform in `±sqrt(6/fan_in)`, biases zero.
pub fn init_model(config: &MlpConfig, seed: u64) -> Result<FlatParams> {
    config.validate()?;
    let mut rng = rng_from(seed, &[tag::INIT]);
    let mut v = vec![0.0; config.param_count()];
    for l in config.layout() {
        let bound = (6.0 / l.fan_in as f64).sqrt();
        for w in &mut v[l.weight] {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(FlatParams(v))
}

/// Parameter nodes placed on a tape, one `(weight, bias)` pair per layer.
pub struct TapeParams(Vec<(Var, Var)>);

impl TapeParams {
    pub fn leaves(tape: &mut Tape, params: &FlatParams, config: &MlpConfig) -> Result<Self> {
        Ok(TapeParams(unflatten(params, config)?.into_iter().map(|(w, b)| (tape.leaf(w), tape.leaf(b))).collect()))
    }

    pub fn constants(tape: &mut Tape, params: &FlatParams, config: &MlpConfig) -> Result<Self> {
        Ok(TapeParams(
            unflatten(params, config)?.into_iter().map(|(w, b)| (tape.constant(w), tape.constant(b))).collect(),
        ))
    }

    /// Logits `[n × num_classes]` for an `[n × input_dim]` input node.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let mut h = input;
        let last = self.0.len() - 1;
        for (i, &(w, b)) in self.0.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Gradient flattened in parameter layout.
    pub fn flat_grad(&self, grads: &crate::autodiff::Gradients) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &(w, b) in &self.0 {
            out.extend(grads.wrt(w)?.into_data());
            out.extend(grads.wrt(b)?.into_data());
        }
        Ok(out)
    }
}

fn check_input(config: &MlpConfig, dim: usize) -> Result<()> {
    if dim != config.input_dim {
        return Err(Error::dim(format!("input has {dim} features, model expects {}", config.input_dim)));
    }
    Ok(())
}

/// Logits for a feature matrix, evaluated without a tape.
pub fn logits(params: &FlatParams, config: &MlpConfig, features: &Tensor) -> Result<Tensor> {
    let (_, d) = features.dims2()?;
    check_input(config, d)?;
    let layers = unflatten(params, config)?;
    let last = layers.len() - 1;
    let mut h = features.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        h = h.matmul(w)?;
        let m = b.len();
        for row in h.data_mut().chunks_mut(m) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
                if i < last && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(h)
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &FlatParams, config: &MlpConfig, features: &[f64]) -> Result<usize> {
    let x = Tensor::matrix(1, features.len(), features.to_vec())?;
    Ok(argmax(logits(params, config, &x)?.data()))
}

pub fn predict_batch(params: &FlatParams, config: &MlpConfig, features: &Tensor) -> Result<Vec<usize>> {
    let z = logits(params, config, features)?;
    Ok(z.data().chunks(config.num_classes).map(argmax).collect())
}

/// Fraction of `data` classified correctly.
pub fn accuracy(params: &FlatParams, config: &MlpConfig, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Evaluation("accuracy on an empty set".into()));
    }
    let preds = predict_batch(params, config, &data.all_features()?)?;
    let correct = preds.iter().zip(data.examples()).filter(|(p, e)| **p == e.label).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy and its gradient over the listed examples of `data`.
pub fn batch_loss_and_grad(
    params: &FlatParams,
    config: &MlpConfig,
    data: &Dataset,
    indices: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    check_input(config, data.dim())?;
    let mut tape = Tape::new();
    let p = TapeParams::leaves(&mut tape, params, config)?;
    let x = tape.constant(data.feature_matrix(indices)?);
    let z = p.forward(&mut tape, x)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.examples()[i].label).collect();
    let loss = tape.softmax_cross_entropy(z, &labels)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss)?.item()?, p.flat_grad(&grads)?))
}

/// Mean cross-entropy and gradient over the whole batch.
pub fn loss_and_grad(params: &FlatParams, config: &MlpConfig, batch: &Dataset) -> Result<(f64, Vec<f64>)> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    batch_loss_and_grad(params, config, batch, &idx)
}

/// Cross-entropy gradient of a single example, by explicit backpropagation
/// without a tape.
pub fn example_grad(params: &FlatParams, config: &MlpConfig, features: &[f64], label: usize) -> Result<Vec<f64>> {
    check_input(config, features.len())?;
    if params.len() != config.param_count() {
        return Err(Error::dim(format!("{} parameters for a model of {}", params.len(), config.param_count())));
    }
    if label >= config.num_classes {
        return Err(Error::Index(format!("label {label} of {} classes", config.num_classes)));
    }
    let layout = config.layout();
    let w = params.values();
    let mut acts: Vec<Vec<f64>> = vec![features.to_vec()];
    for (li, l) in layout.iter().enumerate() {
        let h = &acts[li];
        let mut z = w[l.bias.clone()].to_vec();
        for (i, &hi) in h.iter().enumerate() {
            if hi == 0.0 {
                continue;
            }
            let row = &w[l.weight.start + i * l.fan_out..l.weight.start + (i + 1) * l.fan_out];
            for (zj, &wij) in z.iter_mut().zip(row) {
                *zj += hi * wij;
            }
        }
        if li + 1 < layout.len() {
            for v in &mut z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        acts.push(z);
    }
    let logits = acts.last().unwrap_or(&acts[0]);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut dz: Vec<f64> = exps.iter().map(|e| e / total).collect();
    dz[label] -= 1.0;

    let mut grad = vec![0.0; w.len()];
    for (li, l) in layout.iter().enumerate().rev() {
        let h = &acts[li];
        for (i, &hi) in h.iter().enumerate() {
            if hi == 0.0 {
                continue;
            }
            let g = &mut grad[l.weight.start + i * l.fan_out..l.weight.start + (i + 1) * l.fan_out];
            for (gij, &d) in g.iter_mut().zip(&dz) {
                *gij = hi * d;
            }
        }
        grad[l.bias.clone()].copy_from_slice(&dz);
        if li == 0 {
            break;
        }
        let mut dh = vec![0.0; l.fan_in];
        for (i, dhi) in dh.iter_mut().enumerate() {
            if h[i] <= 0.0 {
                continue;
            }
            let row = &w[l.weight.start + i * l.fan_out..l.weight.start + (i + 1) * l.fan_out];
            *dhi = row.iter().zip(&dz).map(|(a, b)| a * b).sum();
        }
        dz = dh;
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite example gradient".into()));
    }
    Ok(grad)
}

pub fn mean_loss(params: &FlatParams, config: &MlpConfig, data: &Dataset) -> Result<f64> {
    Ok(loss_and_grad(params, config, data)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Proximal pull `mu·(ω − center)` added to every gradient.
#[derive(Debug, Clone, Copy)]
pub struct Prox<'a> {
    pub center: &'a FlatParams,
    pub mu: f64,
}

/// Projection onto the L2 ball of `radius` around `center`, applied after
/// every epoch.
#[derive(Debug, Clone, Copy)]
pub struct Projection<'a> {
    pub center: &'a FlatParams,
    pub radius: f64,
}

/// Optional modifications of plain mini-batch SGD.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalHooks<'a> {
    pub prox: Option<Prox<'a>>,
    /// Added to every gradient (control-variate correction).
    pub correction: Option<&'a [f64]>,
    /// Coordinates marked `true` never move.
    pub frozen: Option<&'a [bool]>,
    pub projection: Option<Projection<'a>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FlatParams,
    /// Number of SGD steps taken.
    pub steps: usize,
}

/// Gradient oracle used by [`train_with`]: receives the current parameters,
/// the batch indices and the global step index.
pub trait BatchGradient {
    fn gradient(&mut self, params: &FlatParams, batch: &[usize], step: usize) -> Result<Vec<f64>>;
}

/// Plain mean cross-entropy gradient on the batch.
pub struct CrossEntropyGrad<'a> {
    pub config: &'a MlpConfig,
    pub data: &'a Dataset,
}

impl BatchGradient for CrossEntropyGrad<'_> {
    fn gradient(&mut self, params: &FlatParams, batch: &[usize], _step: usize) -> Result<Vec<f64>> {
        Ok(batch_loss_and_grad(params, self.config, self.data, batch)?.1)
    }
}

pub fn project_l2(params: &mut FlatParams, proj: &Projection<'_>) {
    let diff: Vec<f64> = params.0.iter().zip(&proj.center.0).map(|(a, c)| a - c).collect();
    let norm = l2_norm(&diff);
    if norm > proj.radius && norm > 0.0 {
        let s = proj.radius / norm;
        for ((p, c), d) in params.0.iter_mut().zip(&proj.center.0).zip(&diff) {
            *p = c + d * s;
        }
    }
}

/// Mini-batch SGD over `n_examples` with the epoch order reshuffled from
/// `(seed, epoch)`. `epochs == 0` or `lr == 0` returns `params` untouched.
pub fn train_with<G: BatchGradient>(
    params: &FlatParams,
    n_examples: usize,
    sgd: &SgdConfig,
    hooks: &LocalHooks<'_>,
    grad: &mut G,
) -> Result<TrainOutcome> {
    if !(sgd.lr >= 0.0) || !sgd.lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be non-negative, got {}", sgd.lr)));
    }
    if sgd.epochs > 0 && n_examples == 0 {
        return Err(Error::invalid("local training on an empty dataset"));
    }
    if sgd.epochs == 0 || sgd.lr == 0.0 {
        return Ok(TrainOutcome { params: params.clone(), steps: 0 });
    }
    let batch_size = sgd.batch_size.max(1);
    let mut w = params.clone();
    let mut step = 0;
    for epoch in 0..sgd.epochs {
        let mut order: Vec<usize> = (0..n_examples).collect();
        order.shuffle(&mut rng_from(sgd.seed, &[tag::SHUFFLE, epoch as u64]));
        for batch in order.chunks(batch_size) {
            let mut g = grad.gradient(&w, batch, step)?;
            if g.len() != w.len() {
                return Err(Error::dim("gradient length differs from parameters"));
            }
            if let Some(p) = hooks.prox.filter(|p| p.mu != 0.0) {
                for ((gi, wi), ci) in g.iter_mut().zip(&w.0).zip(&p.center.0) {
                    *gi += p.mu * (wi - ci);
                }
            }
            if let Some(c) = hooks.correction {
                for (gi, ci) in g.iter_mut().zip(c) {
                    *gi += ci;
                }
            }
            if let Some(f) = hooks.frozen {
                for (gi, &fz) in g.iter_mut().zip(f) {
                    if fz {
                        *gi = 0.0;
                    }
                }
            }
            for (wi, gi) in w.0.iter_mut().zip(&g) {
                *wi -= sgd.lr * gi;
            }
            if w.0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("parameters diverged during local training".into()));
            }
            step += 1;
        }
        if let Some(proj) = &hooks.projection {
            project_l2(&mut w, proj);
        }
    }
    Ok(TrainOutcome { params: w, steps: step })
}

/// Local mini-batch SGD on cross-entropy, optionally with a proximal term.
#[allow(clippy::too_many_arguments)]
pub fn train_local(
    params: &FlatParams,
    config: &MlpConfig,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    prox: Option<Prox<'_>>,
) -> Result<FlatParams> {
    let sgd = SgdConfig { epochs, lr, batch_size, seed };
    let hooks = LocalHooks { prox, ..Default::default() };
    train_hooked(params, config, data, &sgd, &hooks).map(|o| o.params)
}

pub fn train_hooked(
    params: &FlatParams,
    config: &MlpConfig,
    data: &Dataset,
    sgd: &SgdConfig,
    hooks: &LocalHooks<'_>,
) -> Result<TrainOutcome> {
    if !data.is_empty() {
        check_input(config, data.dim())?;
    }
    let mut g = CrossEntropyGrad { config, data };
    train_with(params, data.len(), sgd, hooks, &mut g)
}
