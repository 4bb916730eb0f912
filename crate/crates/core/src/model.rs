//! Feature extractor with unit-norm output and the temperature-scaled cosine
//! classifier.
//!
//! Gradients are computed by hand-written reverse passes. Every loss in the
//! crate reduces to a gradient on the classifier logits and/or on the
//! normalized features, which [`Model::backward`] pushes back to the
//! parameters (and to the inputs, for the perturbation probe).

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, input_err, Error, Result};
use crate::linalg::{self, dot, Matrix};

/// Minimum pre-normalization norm for a feature vector.
pub const MIN_FEATURE_NORM: f64 = 1e-12;

/// Classifier temperature used unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

/// A differentiable map from inputs to raw (unnormalized) features.
///
/// Implementors expose their parameters as one flat vector so the optimizer
/// and the finite-difference checks can treat every backbone uniformly.
pub trait Backbone: Clone {
    type Cache;

    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward(&self, x: &Matrix) -> (Matrix, Self::Cache);
    /// Returns the gradient w.r.t. the flat parameters and w.r.t. the input.
    fn backward(&self, cache: &Self::Cache, grad_out: &Matrix) -> (Vec<f64>, Matrix);
    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(v),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `a` and output `h`.
    #[inline]
    fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

/// Fully connected layer, `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Multi-layer perceptron: activation after every hidden layer, linear output.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mlp {
    pub activation: Activation,
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of each layer.
    inputs: Vec<Matrix>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Matrix>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases.
    pub fn new(spec: &MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.input_dim == 0 || spec.output_dim == 0 || spec.hidden.contains(&0) {
            return Err(config_err("MLP layer widths must be positive"));
        }
        let mut widths = vec![spec.input_dim];
        widths.extend_from_slice(&spec.hidden);
        widths.push(spec.output_dim);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
                Dense { weight: Matrix::from_vec(fan_out, fan_in, data), bias: vec![0.0; fan_out] }
            })
            .collect();
        Ok(Mlp { activation: spec.activation, layers })
    }

    fn affine(layer: &Dense, x: &Matrix) -> Matrix {
        let mut out = x.matmul_t(&layer.weight);
        for i in 0..out.rows() {
            linalg::axpy(out.row_mut(i), &layer.bias, 1.0);
        }
        out
    }
}

impl Backbone for Mlp {
    type Cache = MlpCache;

    fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    fn forward(&self, x: &Matrix) -> (Matrix, MlpCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = Mlp::affine(layer, &h);
            inputs.push(h);
            if l < last {
                pre.push(a.clone());
                a.as_mut_slice().iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = a;
        }
        (h, MlpCache { inputs, pre })
    }

    fn backward(&self, cache: &MlpCache, grad_out: &Matrix) -> (Vec<f64>, Matrix) {
        let n_layers = self.layers.len();
        let mut per_layer: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(n_layers);
        let mut delta = grad_out.clone();
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            let dw = delta.t_matmul(input);
            let mut db = vec![0.0; layer.bias.len()];
            for row in delta.iter_rows() {
                linalg::axpy(&mut db, row, 1.0);
            }
            per_layer.push((dw, db));
            let mut dx = delta.matmul(&layer.weight);
            if l > 0 {
                // `input` is the activation output of layer l-1
                let a = &cache.pre[l - 1];
                for ((g, &av), &hv) in dx.as_mut_slice().iter_mut().zip(a.as_slice()).zip(input.as_slice()) {
                    *g *= self.activation.derivative(av, hv);
                }
            }
            delta = dx;
        }
        per_layer.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (dw, db) in per_layer {
            flat.extend_from_slice(dw.as_slice());
            flat.extend_from_slice(&db);
        }
        (flat, delta)
    }

    fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    fn params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            flat.extend_from_slice(layer.weight.as_slice());
            flat.extend_from_slice(&layer.bias);
        }
        flat
    }

    fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.weight.as_mut_slice();
            w.copy_from_slice(&params[offset..offset + w.len()]);
            offset += w.len();
            let b = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + b]);
            offset += b;
        }
    }
}

/// Scales `raw` to unit L2 norm.
pub fn normalize_feature(raw: &[f64]) -> Result<alloc::vec::Vec<f64>> {
    let mut m = raw.to_vec();
    match linalg::normalize_in_place(&mut m, MIN_FEATURE_NORM) {
        Some(_) => Ok(m),
        None => Err(Error::DegenerateFeature { norm: linalg::norm(raw) }),
    }
}

/// Cosine classifier: one weight vector per class, logits `w_k . m / tau`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CosineClassifier {
    pub weight: Matrix,
    temperature: f64,
    /// Normalize each `w_k` before the dot product so logits are true cosines.
    pub normalize_weights: bool,
}

impl CosineClassifier {
    pub fn new(weight: Matrix, temperature: f64, normalize_weights: bool) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(config_err("classifier temperature must be > 0"));
        }
        if !weight.is_finite() {
            return Err(input_err("classifier weights must be finite"));
        }
        Ok(CosineClassifier { weight, temperature, normalize_weights })
    }

    /// `n_classes x dim` weights drawn from N(0, 0.1^2).
    pub fn random(n_classes: usize, dim: usize, temperature: f64, normalize_weights: bool, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let data = (0..n_classes * dim).map(|_| normal.sample(rng)).collect();
        CosineClassifier::new(Matrix::from_vec(n_classes, dim, data), temperature, normalize_weights)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn n_classes(&self) -> usize {
        self.weight.rows()
    }

    /// Effective class weight vectors and, when normalizing, their norms.
    fn effective_weights(&self) -> Result<(Matrix, Vec<f64>)> {
        if !self.normalize_weights {
            return Ok((self.weight.clone(), Vec::new()));
        }
        let mut w = self.weight.clone();
        let mut norms = Vec::with_capacity(w.rows());
        for k in 0..w.rows() {
            let n = linalg::normalize_in_place(w.row_mut(k), MIN_FEATURE_NORM)
                .ok_or_else(|| input_err("classifier weight row has zero norm"))?;
            norms.push(n);
        }
        Ok((w, norms))
    }

    /// Logits for a batch of unit-norm features.
    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        let (w, _) = self.effective_weights()?;
        let mut z = features.matmul_t(&w);
        z.scale(1.0 / self.temperature);
        Ok(z)
    }

    /// Gradients w.r.t. the raw weights and the features given `grad_logits`.
    pub fn backward(&self, features: &Matrix, grad_logits: &Matrix) -> Result<(Matrix, Matrix)> {
        let (w, norms) = self.effective_weights()?;
        let inv_tau = 1.0 / self.temperature;
        let mut grad_features = grad_logits.matmul(&w);
        grad_features.scale(inv_tau);
        let mut grad_w = grad_logits.t_matmul(features);
        grad_w.scale(inv_tau);
        if self.normalize_weights {
            // d w_hat / d w = (I - w_hat w_hat^T) / |w|
            for (k, &nk) in norms.iter().enumerate() {
                let wk = w.row(k);
                let g = grad_w.row_mut(k);
                let proj = dot(g, wk);
                for (gi, &wi) in g.iter_mut().zip(wk) {
                    *gi = (*gi - proj * wi) / nk;
                }
            }
        }
        Ok((grad_w, grad_features))
    }
}

/// Probability vector for a single unit-norm feature.
pub fn classify(m: &[f64], classifier: &CosineClassifier) -> Result<Vec<f64>> {
    let z = classifier.logits(&Matrix::from_vec(1, m.len(), m.to_vec()))?;
    let mut p = vec![0.0; z.cols()];
    linalg::softmax_into(z.row(0), &mut p);
    Ok(p)
}

/// Mean cross-entropy of the true classes and its gradient w.r.t. the logits.
pub fn classification_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.is_empty() {
        return Err(input_err("classification loss of an empty batch"));
    }
    assert_eq!(logits.rows(), labels.len());
    let n = labels.len() as f64;
    let k = logits.cols();
    let mut grad = Matrix::zeros(logits.rows(), k);
    let mut logp = vec![0.0; k];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, n_classes: k });
        }
        linalg::log_softmax_into(logits.row(i), &mut logp);
        loss -= logp[y];
        let g = grad.row_mut(i);
        for (gk, &lp) in g.iter_mut().zip(&logp) {
            *gk = libm::exp(lp) / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Gradient accumulator shaped like a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub backbone: Vec<f64>,
    pub classifier: Matrix,
}

impl Grads {
    pub fn zeros_like<B: Backbone>(model: &Model<B>) -> Self {
        Grads {
            backbone: vec![0.0; model.backbone.num_params()],
            classifier: Matrix::zeros(model.classifier.weight.rows(), model.classifier.weight.cols()),
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        linalg::axpy(&mut self.backbone, &other.backbone, scale);
        self.classifier.add_scaled(&other.classifier, scale);
    }

    /// Backbone gradients followed by classifier gradients, matching
    /// [`Model::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.backbone.clone();
        v.extend_from_slice(self.classifier.as_slice());
        v
    }
}

/// Everything a forward pass computes that the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass<C> {
    pub raw: Matrix,
    pub norms: Vec<f64>,
    /// Unit-norm features, one row per input.
    pub features: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
    cache: C,
}

impl<C> ForwardPass<C> {
    pub fn predictions(&self) -> Vec<usize> {
        self.probs.iter_rows().map(linalg::argmax).collect()
    }
}

/// Backbone, feature normalization and cosine classifier.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Model<B = Mlp> {
    pub backbone: B,
    pub classifier: CosineClassifier,
}

impl Model<Mlp> {
    /// Seeded MLP backbone with a randomly initialized cosine classifier.
    pub fn mlp(spec: &MlpSpec, n_classes: usize, temperature: f64, normalize_weights: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Mlp::new(spec, &mut rng)?;
        let classifier = CosineClassifier::random(n_classes, spec.output_dim, temperature, normalize_weights, &mut rng)?;
        Ok(Model { backbone, classifier })
    }
}

impl<B: Backbone> Model<B> {
    pub fn n_classes(&self) -> usize {
        self.classifier.n_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    /// Normalized features and classifier outputs for a batch of inputs.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass<B::Cache>> {
        if !x.is_finite() {
            return Err(input_err("inputs must be finite"));
        }
        let (raw, cache) = self.backbone.forward(x);
        let mut features = raw.clone();
        let mut norms = Vec::with_capacity(raw.rows());
        for i in 0..raw.rows() {
            let n = linalg::normalize_in_place(features.row_mut(i), MIN_FEATURE_NORM)
                .ok_or(Error::DegenerateFeature { norm: linalg::norm(raw.row(i)) })?;
            norms.push(n);
        }
        let logits = self.classifier.logits(&features)?;
        let probs = linalg::softmax_rows(&logits);
        Ok(ForwardPass { raw, norms, features, logits, probs, cache })
    }

    /// Unit-norm feature of a single input.
    pub fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pass = self.forward(&Matrix::from_vec(1, x.len(), x.to_vec()))?;
        Ok(pass.features.row(0).to_vec())
    }

    /// Pushes gradients on the logits and/or the normalized features back to
    /// the parameters and the inputs.
    pub fn backward(
        &self,
        pass: &ForwardPass<B::Cache>,
        grad_logits: Option<&Matrix>,
        grad_features: Option<&Matrix>,
    ) -> Result<(Grads, Matrix)> {
        let n = pass.features.rows();
        let d = pass.features.cols();
        let mut g_m = match grad_features {
            Some(g) => g.clone(),
            None => Matrix::zeros(n, d),
        };
        let classifier_grad = match grad_logits {
            Some(gz) => {
                let (gw, gm) = self.classifier.backward(&pass.features, gz)?;
                g_m.add_scaled(&gm, 1.0);
                gw
            }
            None => Matrix::zeros(self.classifier.weight.rows(), self.classifier.weight.cols()),
        };
        // m = z / |z|  =>  dL/dz = (g - m (m . g)) / |z|
        let mut g_raw = g_m;
        for i in 0..n {
            let m = pass.features.row(i);
            let g = g_raw.row_mut(i);
            let proj = dot(g, m);
            for (gi, &mi) in g.iter_mut().zip(m) {
                *gi = (*gi - proj * mi) / pass.norms[i];
            }
        }
        let (backbone_grad, grad_x) = self.backbone.backward(&pass.cache, &g_raw);
        Ok((Grads { backbone: backbone_grad, classifier: classifier_grad }, grad_x))
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params() + self.classifier.weight.as_slice().len()
    }

    /// Backbone parameters followed by classifier weights.
    pub fn params(&self) -> Vec<f64> {
        let mut v = self.backbone.params();
        v.extend_from_slice(self.classifier.weight.as_slice());
        v
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let nb = self.backbone.num_params();
        self.backbone.set_params(&params[..nb]);
        self.classifier.weight.as_mut_slice().copy_from_slice(&params[nb..]);
    }
}
