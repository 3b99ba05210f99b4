//! Small dense classifier with hand-written reverse-mode gradients.
//!
//! The network is a stack of affine layers with `tanh` between them and a
//! linear output layer producing `K` logits. Every objective used by the
//! self-training loop depends on the parameters only through the logits, so
//! the backward pass takes a per-sample `∂loss/∂logits` and propagates it
//! through the layers. That keeps the differentiation exact without a general
//! autodiff graph.
//!
//! Weights are row-major with shape `(out_dim, in_dim)`.

use std::ops::Deref;

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Unnormalized class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Self {
        Logits(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Logits {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Checks entries lie in `[0, 1]` and sum to one within `1e-9`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("probability vector is empty"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("probability entry outside [0, 1]"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("probabilities sum to {sum}")));
        }
        Ok(ProbVector(values))
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `log Σ exp(z_k)` with max-subtraction.
pub fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> ProbVector {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    ProbVector(exps.into_iter().map(|e| e / total).collect())
}

/// `z_k - logsumexp(z)` for every class.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = logsumexp(z);
    z.iter().map(|&v| v - lse).collect()
}

/// Result of [`cross_entropy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Set when some `p_k` with `y_k > 0` fell below [`PROB_FLOOR`].
    pub clamped: bool,
}

/// `-Σ_k y_k ln p_k`. The zero label vector contributes nothing.
pub fn cross_entropy(p: &[f64], y: &[f64]) -> CrossEntropy {
    let mut loss = 0.0;
    let mut clamped = false;
    for (&pk, &yk) in p.iter().zip(y) {
        if yk == 0.0 {
            continue;
        }
        let pk = if pk < PROB_FLOOR {
            clamped = true;
            PROB_FLOOR
        } else {
            pk
        };
        loss -= yk * pk.ln();
    }
    CrossEntropy { loss, clamped }
}

/// Affine layer `W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("layer dimensions must be positive"));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::config(format!(
                "layer {out_dim}x{in_dim} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::config("layer parameters must be finite"));
        }
        Ok(Dense { in_dim, out_dim, weights, bias })
    }

    /// Glorot-uniform weights in `[-a, a]`, `a = sqrt(6 / (in + out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::config(format!("init range: {e}")))?;
        let weights = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Dense::new(in_dim, out_dim, weights, vec![0.0; out_dim])
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            out.push(row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b);
        }
    }
}

/// All weights and biases of the classifier.
///
/// Hidden layers use `tanh`; the final layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<Dense>,
}

impl ModelParams {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::config(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(ModelParams { layers })
    }

    /// Seeded Glorot initialization for `input_dim -> hidden... -> classes`.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let layers = dims
            .windows(2)
            .map(|d| Dense::glorot(d[0], d[1], rng))
            .collect::<Result<Vec<_>>>()?;
        ModelParams::new(layers)
    }

    /// All-zero parameters with the given layer dimensions.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .map(|d| Dense::new(d[0], d[1], vec![0.0; d[0] * d[1]], vec![0.0; d[1]]))
            .collect::<Result<Vec<_>>>()?;
        ModelParams::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    /// Inverse of [`ModelParams::to_flat`].
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let nw = l.weights.len();
            let nb = l.bias.len();
            layers.push(Dense::new(
                l.in_dim,
                l.out_dim,
                flat[offset..offset + nw].to_vec(),
                flat[offset + nw..offset + nw + nb].to_vec(),
            )?);
            offset += nw + nb;
        }
        ModelParams::new(layers)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::config(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { layer: 0, detail: "non-finite input".into() });
        }
        Ok(())
    }

    /// Logits `f_w(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Logits> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical { layer: i, detail: "non-finite activation".into() });
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(Logits(cur))
    }

    /// Layer inputs for every layer plus the final logits.
    fn forward_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.apply(&acts[i], &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical { layer: i, detail: "non-finite activation".into() });
            }
            acts.push(out);
        }
        Ok(acts)
    }

    /// Propagates `delta = ∂loss/∂logits` back through the layers,
    /// accumulating parameter gradients into `grads`. Returns `∂loss/∂x`.
    fn backprop(&self, acts: &[Vec<f64>], delta: &[f64], grads: &mut GradientSet) -> Result<Vec<f64>> {
        let mut delta = delta.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &acts[i];
            if delta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical { layer: i, detail: "non-finite gradient".into() });
            }
            let g = &mut grads.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (w, &a) in row.iter_mut().zip(input) {
                    *w += d * a;
                }
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            if i > 0 {
                // input of layer i is tanh output of layer i-1
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Total loss and its exact gradient over `batch`.
    ///
    /// `loss` supplies, for sample `i` with logits `z`, the scalar loss and
    /// `∂loss/∂z`; the result is the sum over the batch.
    pub fn backward<X, L>(&self, batch: &[X], loss: &L) -> Result<(f64, GradientSet)>
    where
        X: AsRef<[f64]>,
        L: LogitLoss + ?Sized,
    {
        let mut grads = GradientSet::zeros_like(self);
        let mut total = 0.0;
        for (i, x) in batch.iter().enumerate() {
            let acts = self.forward_trace(x.as_ref())?;
            let (value, dz) = loss.eval(i, acts.last().expect("logits"));
            if !value.is_finite() {
                return Err(Error::Numerical {
                    layer: self.layers.len() - 1,
                    detail: format!("non-finite loss for sample {i}"),
                });
            }
            total += value;
            if dz.iter().all(|&d| d == 0.0) {
                continue;
            }
            self.backprop(&acts, &dz, &mut grads)?;
        }
        Ok((total, grads))
    }

    /// `∂/∂x` of a logit-space function whose logit gradient is `dlogits`.
    pub fn input_gradient(&self, x: &[f64], dlogits: &[f64]) -> Result<Vec<f64>> {
        let acts = self.forward_trace(x)?;
        let mut scratch = GradientSet::zeros_like(self);
        self.backprop(&acts, dlogits, &mut scratch)
    }
}

/// A scalar loss defined on the logits of each sample in a batch.
pub trait LogitLoss {
    /// Loss for sample `index` and its gradient w.r.t. the logits.
    fn eval(&self, index: usize, logits: &[f64]) -> (f64, Vec<f64>);
}

impl<F> LogitLoss for F
where
    F: Fn(usize, &[f64]) -> (f64, Vec<f64>),
{
    fn eval(&self, index: usize, logits: &[f64]) -> (f64, Vec<f64>) {
        self(index, logits)
    }
}

/// Softmax cross-entropy against label vector `y` (simplex or zero),
/// with gradient `(Σy)·softmax(z) - y`.
pub fn softmax_cross_entropy(z: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let mass: f64 = y.iter().sum();
    if mass == 0.0 {
        return (0.0, vec![0.0; z.len()]);
    }
    let logp = log_softmax(z);
    let loss = -y.iter().zip(&logp).map(|(yk, lp)| if *yk == 0.0 { 0.0 } else { yk * lp }).sum::<f64>();
    let grad = logp.iter().zip(y).map(|(lp, yk)| mass * lp.exp() - yk).collect();
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients shaped like a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientSet {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerGrad] {
        &self.layers
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += factor * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += factor * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Momentum buffer for [`sgd_step`].
#[derive(Debug, Clone, Default)]
pub struct MomentumState {
    velocity: Option<GradientSet>,
}

impl MomentumState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Hyperparameters of the SGD update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD update with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λθ`, `θ ← θ - lr·v`.
pub fn sgd_step(
    params: &ModelParams,
    grads: &GradientSet,
    cfg: SgdConfig,
    state: &mut MomentumState,
) -> ModelParams {
    let mut step = grads.clone();
    if cfg.weight_decay != 0.0 {
        for (g, l) in step.layers.iter_mut().zip(&params.layers) {
            for (gv, w) in g.weights.iter_mut().zip(&l.weights) {
                *gv += cfg.weight_decay * w;
            }
            for (gv, b) in g.bias.iter_mut().zip(&l.bias) {
                *gv += cfg.weight_decay * b;
            }
        }
    }
    if cfg.momentum != 0.0 {
        if let Some(v) = state.velocity.as_mut() {
            v.scale(cfg.momentum);
            v.add_scaled(&step, 1.0);
            step = v.clone();
        } else {
            state.velocity = Some(step.clone());
        }
    }
    let mut next = params.clone();
    for (l, g) in next.layers.iter_mut().zip(&step.layers) {
        for (w, d) in l.weights.iter_mut().zip(&g.weights) {
            *w -= cfg.lr * d;
        }
        for (b, d) in l.bias.iter_mut().zip(&g.bias) {
            *b -= cfg.lr * d;
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use approx::assert_relative_eq;

    fn single(weights: Vec<f64>, bias: Vec<f64>, in_dim: usize, out_dim: usize) -> ModelParams {
        ModelParams::new(vec![Dense::new(in_dim, out_dim, weights, bias).unwrap()]).unwrap()
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = ModelParams::zeros(&[3, 5, 4]).unwrap();
        assert_eq!(&*m.forward(&[1.0, -2.0, 0.3]).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn identity_layer() {
        let m = single(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        assert_eq!(&*m.forward(&[0.5, -0.2]).unwrap(), &[0.5, -0.2]);
    }

    #[test]
    fn hand_matmul() {
        let m = single(vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0], 2, 2);
        assert_eq!(&*m.forward(&[1.0, 1.0]).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let m = ModelParams::zeros(&[2, 3]).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::Config(_))));
        let bad = ModelParams::new(vec![
            Dense::new(2, 3, vec![0.0; 6], vec![0.0; 3]).unwrap(),
            Dense::new(4, 2, vec![0.0; 8], vec![0.0; 2]).unwrap(),
        ]);
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in p.iter() {
            assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax(&[0.0, 2f64.ln(), 3f64.ln()]);
        assert_relative_eq!(p[0], 1.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(p[1], 2.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(p[2], 3.0 / 6.0, epsilon = 1e-15);
        let a = softmax(&[0.3, -1.2]);
        let b = softmax(&[7.3, 5.8]);
        assert_relative_eq!(a[0], b[0], epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let p = [0.25, 0.5, 0.25];
        assert_relative_eq!(cross_entropy(&p, &[0.0, 1.0, 0.0]).loss, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(cross_entropy(&p, &[0.0; 3]).loss, 0.0);
        let ce = cross_entropy(&p, &[0.05, 0.9, 0.05]).loss;
        assert_relative_eq!(ce, 0.762462, epsilon = 1e-6);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let ce = cross_entropy(&[1.0, 0.0], &[0.0, 1.0]);
        assert!(ce.clamped);
        assert_relative_eq!(ce.loss, -(1e-12f64).ln());
    }

    #[test]
    fn softmax_ce_gradient_is_p_minus_y() {
        let (_, g) = softmax_cross_entropy(&[0.0, 0.0], &[1.0, 0.0]);
        assert_eq!(g, vec![-0.5, 0.5]);
        let (l, g) = softmax_cross_entropy(&[0.4, 1.0], &[0.0, 0.0]);
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_label_gives_zero_gradients() {
        let m = ModelParams::init(2, &[4], 3, &mut stream(1, Stream::Init)).unwrap();
        let batch = vec![vec![0.3, -0.1], vec![1.0, 2.0]];
        let (loss, g) = m
            .backward(&batch, &|_: usize, z: &[f64]| softmax_cross_entropy(z, &[0.0, 0.0, 0.0]))
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_central_differences() {
        let m = ModelParams::init(3, &[5, 4], 3, &mut stream(9, Stream::Init)).unwrap();
        let batch = vec![vec![0.3, -0.1, 0.8], vec![-1.0, 0.5, 0.2], vec![0.0, 1.5, -0.7]];
        let labels = [vec![1.0, 0.0, 0.0], vec![0.2, 0.5, 0.3], vec![0.0, 0.0, 1.0]];
        let loss = |i: usize, z: &[f64]| softmax_cross_entropy(z, &labels[i]);
        let (_, g) = m.backward(&batch, &loss).unwrap();
        let analytic = g.to_flat();
        let theta = m.to_flat();
        let h = 1e-5;
        for j in 0..theta.len() {
            let mut plus = theta.clone();
            plus[j] += h;
            let mut minus = theta.clone();
            minus[j] -= h;
            let lp = m.with_flat(&plus).unwrap().backward(&batch, &loss).unwrap().0;
            let lm = m.with_flat(&minus).unwrap().backward(&batch, &loss).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(analytic[j].abs()).max(1e-7);
            assert!((fd - analytic[j]).abs() / denom < 1e-4, "param {j}: fd {fd} vs {}", analytic[j]);
        }
    }

    #[test]
    fn sgd_examples() {
        let m = single(vec![1.0], vec![0.0], 1, 1);
        let mut g = GradientSet::zeros_like(&m);
        g.layers[0].weights[0] = 0.5;
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let next = sgd_step(&m, &g, cfg, &mut MomentumState::new());
        assert_relative_eq!(next.layers()[0].weights()[0], 0.95, epsilon = 1e-15);

        let zero = GradientSet::zeros_like(&m);
        assert_eq!(sgd_step(&m, &zero, cfg, &mut MomentumState::new()), m);
        let frozen = SgdConfig { lr: 0.0, momentum: 0.9, weight_decay: 5e-4 };
        assert_eq!(sgd_step(&m, &g, frozen, &mut MomentumState::new()), m);
    }

    #[test]
    fn momentum_accumulates() {
        let m = single(vec![0.0], vec![0.0], 1, 1);
        let mut g = GradientSet::zeros_like(&m);
        g.layers[0].weights[0] = 1.0;
        let cfg = SgdConfig { lr: 1.0, momentum: 0.5, weight_decay: 0.0 };
        let mut state = MomentumState::new();
        let a = sgd_step(&m, &g, cfg, &mut state);
        let b = sgd_step(&a, &g, cfg, &mut state);
        // v1 = 1, v2 = 0.5 + 1
        assert_relative_eq!(b.layers()[0].weights()[0], -2.5);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = ModelParams::init(2, &[32, 32], 2, &mut stream(3, Stream::Init)).unwrap();
        let a = m.forward(&[0.123, -4.5]).unwrap();
        let b = m.forward(&[0.123, -4.5]).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
