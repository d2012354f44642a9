//! Feedforward network with an independent Gaussian distribution per
//! parameter.
//!
//! Each weight and bias carries a posterior mean `mu` and a scale
//! parameter `rho` with `sigma = softplus(rho) = ln(1 + exp(rho))`, so the
//! scale stays positive under unconstrained updates. The prior is centered
//! at the random initialization (`prior_mu`, frozen) with a single shared
//! scale `prior_sigma`, and the posterior starts equal to the prior.
//!
//! Sampling uses the reparameterization `w = mu + sigma * z` with
//! `z ~ N(0, 1)` drawn once per mini-batch, which makes the loss a
//! deterministic differentiable function of `(mu, rho)` for fixed noise:
//!
//! ```text
//! d loss / d mu  = d loss / d w,
//! d loss / d rho = d loss / d w * z * sigmoid(rho).
//! ```
//!
//! The divergence between posterior and prior is the closed-form diagonal
//! Gaussian sum `ln(sigma0/sigma) + (sigma^2 + (mu - mu0)^2) / (2 sigma0^2)
//! - 1/2` over all parameters.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Default clamp floor for the softmax probability inside the bounded
/// cross-entropy loss.
pub const DEFAULT_P_MIN: f64 = 1e-4;

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus on positive inputs: `ln(exp(s) - 1)`.
pub(crate) fn softplus_inv(s: f64) -> f64 {
    s.exp_m1().ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

/// Layer widths of a multilayer perceptron, input first, logits last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl Architecture {
    /// Requires at least an input and an output layer, all widths
    /// positive. Hidden layers use ReLU; the final layer is linear.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid(format!(
                "architecture needs at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if let Some(zero) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::invalid(format!("layer {zero} has width 0")));
        }
        Ok(Architecture {
            layer_sizes,
            activation: Activation::Relu,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight matrices, one less than the layer count.
    pub fn weight_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Per-layer posterior and prior parameters. Weight matrices are
/// `(fan_out, fan_in)` row-major.
#[derive(Debug, Clone)]
pub struct LayerPosterior {
    pub(crate) weight_mu: Array2<f64>,
    pub(crate) weight_rho: Array2<f64>,
    pub(crate) bias_mu: Array1<f64>,
    pub(crate) bias_rho: Array1<f64>,
    pub(crate) prior_weight_mu: Array2<f64>,
    pub(crate) prior_bias_mu: Array1<f64>,
}

impl LayerPosterior {
    pub fn weight_mu(&self) -> ArrayView2<'_, f64> {
        self.weight_mu.view()
    }

    pub fn weight_rho(&self) -> ArrayView2<'_, f64> {
        self.weight_rho.view()
    }

    pub fn bias_mu(&self) -> ArrayView1<'_, f64> {
        self.bias_mu.view()
    }

    pub fn bias_rho(&self) -> ArrayView1<'_, f64> {
        self.bias_rho.view()
    }

    pub fn prior_weight_mu(&self) -> ArrayView2<'_, f64> {
        self.prior_weight_mu.view()
    }

    pub fn prior_bias_mu(&self) -> ArrayView1<'_, f64> {
        self.prior_bias_mu.view()
    }

    pub fn weight_sigma(&self) -> Array2<f64> {
        self.weight_rho.mapv(softplus)
    }

    pub fn bias_sigma(&self) -> Array1<f64> {
        self.bias_rho.mapv(softplus)
    }
}

/// One standard normal draw per parameter, shaped like the network.
#[derive(Debug, Clone)]
pub struct NoiseDraws {
    pub(crate) weights: Vec<Array2<f64>>,
    pub(crate) biases: Vec<Array1<f64>>,
}

impl NoiseDraws {
    /// Fresh standard normal draws. Order is fixed: layer by layer,
    /// weights row-major, then biases.
    pub fn standard<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut weights = Vec::with_capacity(arch.weight_layers());
        let mut biases = Vec::with_capacity(arch.weight_layers());
        for w in arch.layer_sizes().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            weights.push(Array2::from_shape_simple_fn((fan_out, fan_in), || {
                rng.sample::<f64, _>(StandardNormal)
            }));
            biases.push(Array1::from_shape_simple_fn(fan_out, || {
                rng.sample::<f64, _>(StandardNormal)
            }));
        }
        NoiseDraws { weights, biases }
    }

    /// All-zero noise: sampling collapses to the posterior means.
    pub fn zeros(arch: &Architecture) -> Self {
        let mut weights = Vec::with_capacity(arch.weight_layers());
        let mut biases = Vec::with_capacity(arch.weight_layers());
        for w in arch.layer_sizes().windows(2) {
            weights.push(Array2::zeros((w[1], w[0])));
            biases.push(Array1::zeros(w[1]));
        }
        NoiseDraws { weights, biases }
    }

    fn matches(&self, arch: &Architecture) -> bool {
        self.weights.len() == arch.weight_layers()
            && arch
                .layer_sizes()
                .windows(2)
                .zip(self.weights.iter().zip(&self.biases))
                .all(|(w, (wz, bz))| wz.dim() == (w[1], w[0]) && bz.len() == w[1])
    }
}

/// Gradient (or update direction) with one slot per posterior parameter.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight_mu: Array2<f64>,
    pub weight_rho: Array2<f64>,
    pub bias_mu: Array1<f64>,
    pub bias_rho: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = arch
            .layer_sizes()
            .windows(2)
            .map(|w| LayerGrads {
                weight_mu: Array2::zeros((w[1], w[0])),
                weight_rho: Array2::zeros((w[1], w[0])),
                bias_mu: Array1::zeros(w[1]),
                bias_rho: Array1::zeros(w[1]),
            })
            .collect();
        ParamGrads { layers }
    }

    pub fn scale(&mut self, a: f64) {
        for layer in &mut self.layers {
            layer.weight_mu.mapv_inplace(|v| a * v);
            layer.weight_rho.mapv_inplace(|v| a * v);
            layer.bias_mu.mapv_inplace(|v| a * v);
            layer.bias_rho.mapv_inplace(|v| a * v);
        }
    }

    /// `self += a * other`. Panics if the shapes differ.
    pub fn axpy(&mut self, a: f64, other: &ParamGrads) {
        assert_eq!(self.layers.len(), other.layers.len(), "layer count mismatch");
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.weight_mu.scaled_add(a, &src.weight_mu);
            dst.weight_rho.scaled_add(a, &src.weight_rho);
            dst.bias_mu.scaled_add(a, &src.bias_mu);
            dst.bias_rho.scaled_add(a, &src.bias_rho);
        }
    }

    /// `a * g1 + b * g2` without mutating either input.
    pub fn linear_combination(a: f64, g1: &ParamGrads, b: f64, g2: &ParamGrads) -> ParamGrads {
        let mut out = g1.clone();
        out.scale(a);
        out.axpy(b, g2);
        out
    }

    pub fn dot(&self, other: &ParamGrads) -> f64 {
        assert_eq!(self.layers.len(), other.layers.len(), "layer count mismatch");
        let mut acc = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            acc += Zip::from(&a.weight_mu)
                .and(&b.weight_mu)
                .fold(0.0, |s, &x, &y| s + x * y);
            acc += Zip::from(&a.weight_rho)
                .and(&b.weight_rho)
                .fold(0.0, |s, &x, &y| s + x * y);
            acc += Zip::from(&a.bias_mu)
                .and(&b.bias_mu)
                .fold(0.0, |s, &x, &y| s + x * y);
            acc += Zip::from(&a.bias_rho)
                .and(&b.bias_rho)
                .fold(0.0, |s, &x, &y| s + x * y);
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Diagonal Gaussian posterior over every network parameter, plus the
/// frozen prior it is certified against.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    arch: Architecture,
    layers: Vec<LayerPosterior>,
    prior_sigma: f64,
    seed: u64,
}

/// Draws the prior center and starts the posterior on top of it.
///
/// Prior weight means are sampled from a centered Gaussian with variance
/// `1 / fan_in` of the layer; prior bias means are zero. Every scale
/// starts at `sigma0`. The same seed reproduces the same prior bit for
/// bit.
pub fn init_prior(arch: Architecture, sigma0: f64, seed: u64) -> Result<GaussianPosterior> {
    if !sigma0.is_finite() || sigma0 <= 0.0 {
        return Err(Error::invalid(format!("sigma0 = {sigma0} is not positive")));
    }
    let rho0 = softplus_inv(sigma0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(arch.weight_layers());
    for w in arch.layer_sizes().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = (1.0 / fan_in as f64).sqrt();
        let prior_weight_mu = Array2::from_shape_simple_fn((fan_out, fan_in), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        layers.push(LayerPosterior {
            weight_mu: prior_weight_mu.clone(),
            weight_rho: Array2::from_elem((fan_out, fan_in), rho0),
            bias_mu: Array1::zeros(fan_out),
            bias_rho: Array1::from_elem(fan_out, rho0),
            prior_weight_mu,
            prior_bias_mu: Array1::zeros(fan_out),
        });
    }
    Ok(GaussianPosterior {
        arch,
        layers,
        prior_sigma: sigma0,
        seed,
    })
}

struct ForwardTrace {
    /// Input to each weight layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer; the last one is the logits.
    pres: Vec<Array2<f64>>,
    /// Sampled weight matrices, needed to push deltas backward.
    weights: Vec<Array2<f64>>,
}

impl GaussianPosterior {
    pub(crate) fn from_parts(
        arch: Architecture,
        layers: Vec<LayerPosterior>,
        prior_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if !prior_sigma.is_finite() || prior_sigma <= 0.0 {
            return Err(Error::invalid(format!(
                "prior sigma = {prior_sigma} is not positive"
            )));
        }
        if layers.len() != arch.weight_layers() {
            return Err(Error::invalid(format!(
                "expected {} layers, got {}",
                arch.weight_layers(),
                layers.len()
            )));
        }
        for (i, (w, layer)) in arch.layer_sizes().windows(2).zip(&layers).enumerate() {
            let want = (w[1], w[0]);
            let shapes_ok = layer.weight_mu.dim() == want
                && layer.weight_rho.dim() == want
                && layer.prior_weight_mu.dim() == want
                && layer.bias_mu.len() == w[1]
                && layer.bias_rho.len() == w[1]
                && layer.prior_bias_mu.len() == w[1];
            if !shapes_ok {
                return Err(Error::invalid(format!(
                    "layer {i} tensors do not match architecture widths {want:?}"
                )));
            }
        }
        Ok(GaussianPosterior {
            arch,
            layers,
            prior_sigma,
            seed,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerPosterior] {
        &self.layers
    }

    pub fn prior_sigma(&self) -> f64 {
        self.prior_sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn forward_trace(&self, inputs: ArrayView2<f64>, noise: &NoiseDraws) -> Result<ForwardTrace> {
        if inputs.ncols() != self.arch.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, network expects {}",
                inputs.ncols(),
                self.arch.input_dim()
            )));
        }
        assert!(noise.matches(&self.arch), "noise shaped for a different architecture");
        let mut trace = ForwardTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pres: Vec::with_capacity(self.layers.len()),
            weights: Vec::with_capacity(self.layers.len()),
        };
        let mut x = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut w = layer.weight_rho.mapv(softplus);
            Zip::from(&mut w)
                .and(&layer.weight_mu)
                .and(&noise.weights[l])
                .for_each(|sigma, &mu, &z| *sigma = mu + *sigma * z);
            let mut b = layer.bias_rho.mapv(softplus);
            Zip::from(&mut b)
                .and(&layer.bias_mu)
                .and(&noise.biases[l])
                .for_each(|sigma, &mu, &z| *sigma = mu + *sigma * z);

            let mut pre = x.dot(&w.t());
            for mut row in pre.rows_mut() {
                row += &b;
            }
            let is_last = l + 1 == self.layers.len();
            let next = if is_last {
                pre.clone()
            } else {
                pre.mapv(|v| v.max(0.0))
            };
            trace.inputs.push(x);
            trace.pres.push(pre);
            trace.weights.push(w);
            x = next;
        }
        Ok(trace)
    }

    /// Logits for a batch under one shared noise draw.
    pub fn sample_forward_batch(
        &self,
        inputs: ArrayView2<f64>,
        noise: &NoiseDraws,
    ) -> Result<Array2<f64>> {
        let trace = self.forward_trace(inputs, noise)?;
        Ok(trace.pres.into_iter().last().unwrap())
    }

    /// Logits for a single input under one noise draw.
    pub fn sample_forward(
        &self,
        input: ArrayView1<f64>,
        noise: &NoiseDraws,
    ) -> Result<Array1<f64>> {
        let batch = input.insert_axis(Axis(0));
        let logits = self.sample_forward_batch(batch, noise)?;
        Ok(logits.index_axis(Axis(0), 0).to_owned())
    }

    /// Divergence of the posterior from the prior, in nats. Nonnegative;
    /// zero exactly when the posterior still equals the prior (up to
    /// float rounding, which is clamped away).
    pub fn gaussian_kl(&self) -> f64 {
        let s0 = self.prior_sigma;
        let inv_2s0sq = 1.0 / (2.0 * s0 * s0);
        let mut total = 0.0;
        for layer in &self.layers {
            total += Zip::from(&layer.weight_mu)
                .and(&layer.weight_rho)
                .and(&layer.prior_weight_mu)
                .fold(0.0, |acc, &mu, &rho, &mu0| {
                    let sigma = softplus(rho);
                    let d = mu - mu0;
                    acc + (s0 / sigma).ln() + (sigma * sigma + d * d) * inv_2s0sq - 0.5
                });
            total += Zip::from(&layer.bias_mu)
                .and(&layer.bias_rho)
                .and(&layer.prior_bias_mu)
                .fold(0.0, |acc, &mu, &rho, &mu0| {
                    let sigma = softplus(rho);
                    let d = mu - mu0;
                    acc + (s0 / sigma).ln() + (sigma * sigma + d * d) * inv_2s0sq - 0.5
                });
        }
        total.max(0.0)
    }

    /// Pathwise gradients of the mean bounded cross-entropy over a batch
    /// under fixed noise, together with the closed-form divergence
    /// gradients. The zero-one loss has no pathwise gradient and is
    /// rejected, but its batch mean rides along for slope estimation.
    pub fn backward(
        &self,
        inputs: ArrayView2<f64>,
        labels: &[u8],
        noise: &NoiseDraws,
        loss: LossKind,
        p_min: f64,
    ) -> Result<BackwardOutput> {
        if loss != LossKind::BoundedXe {
            return Err(Error::UnsupportedLoss(loss.name()));
        }
        let batch = inputs.nrows();
        if batch == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if labels.len() != batch {
            return Err(Error::invalid(format!(
                "batch has {batch} rows but {} labels",
                labels.len()
            )));
        }
        let classes = self.arch.output_dim();
        check_p_min(p_min, classes)?;

        let trace = self.forward_trace(inputs, noise)?;
        let logits = trace.pres.last().unwrap();
        let (xe_mean, zo_mean) = batch_losses(logits.view(), labels, p_min)?;

        // Seed the backward pass with d(mean loss)/d(logits). Rows whose
        // true-class probability is clamped are flat.
        let scale = 1.0 / ((1.0 / p_min).ln() * batch as f64);
        let ln_p_min = p_min.ln();
        let mut delta = Array2::<f64>::zeros(logits.raw_dim());
        for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
            let label = labels[i] as usize;
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut expsum = 0.0;
            for &v in row {
                expsum += (v - max).exp();
            }
            let log_p_true = row[label] - max - expsum.ln();
            if log_p_true <= ln_p_min {
                continue;
            }
            let mut drow = delta.row_mut(i);
            for (j, &v) in row.iter().enumerate() {
                let softmax = (v - max).exp() / expsum;
                drow[j] = (softmax - if j == label { 1.0 } else { 0.0 }) * scale;
            }
        }

        let mut loss_grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let dw = delta.t().dot(&trace.inputs[l]);
            let db = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut dprev = delta.dot(&trace.weights[l]);
                Zip::from(&mut dprev)
                    .and(&trace.pres[l - 1])
                    .for_each(|d, &pre| {
                        if pre <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = dprev;
            }
            let mut weight_rho = dw.clone();
            Zip::from(&mut weight_rho)
                .and(&noise.weights[l])
                .and(&layer.weight_rho)
                .for_each(|g, &z, &rho| *g *= z * sigmoid(rho));
            let mut bias_rho = db.clone();
            Zip::from(&mut bias_rho)
                .and(&noise.biases[l])
                .and(&layer.bias_rho)
                .for_each(|g, &z, &rho| *g *= z * sigmoid(rho));
            loss_grads.push(LayerGrads {
                weight_mu: dw,
                weight_rho,
                bias_mu: db,
                bias_rho,
            });
        }
        loss_grads.reverse();

        Ok(BackwardOutput {
            loss: xe_mean,
            zero_one: zo_mean,
            loss_grads: ParamGrads { layers: loss_grads },
            kl_grads: self.kl_grads(),
        })
    }

    /// Closed-form gradients of [`GaussianPosterior::gaussian_kl`].
    pub fn kl_grads(&self) -> ParamGrads {
        let s0sq = self.prior_sigma * self.prior_sigma;
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let mut weight_mu = layer.weight_mu.clone();
                Zip::from(&mut weight_mu)
                    .and(&layer.prior_weight_mu)
                    .for_each(|g, &mu0| *g = (*g - mu0) / s0sq);
                let weight_rho = layer.weight_rho.mapv(|rho| {
                    let sigma = softplus(rho);
                    (sigma / s0sq - 1.0 / sigma) * sigmoid(rho)
                });
                let mut bias_mu = layer.bias_mu.clone();
                Zip::from(&mut bias_mu)
                    .and(&layer.prior_bias_mu)
                    .for_each(|g, &mu0| *g = (*g - mu0) / s0sq);
                let bias_rho = layer.bias_rho.mapv(|rho| {
                    let sigma = softplus(rho);
                    (sigma / s0sq - 1.0 / sigma) * sigmoid(rho)
                });
                LayerGrads {
                    weight_mu,
                    weight_rho,
                    bias_mu,
                    bias_rho,
                }
            })
            .collect();
        ParamGrads { layers }
    }

    /// `parameters += scale * step`, applied to `mu` and `rho` only; the
    /// prior is frozen. Panics if the shapes differ.
    pub fn apply_update(&mut self, step: &ParamGrads, scale: f64) {
        assert_eq!(self.layers.len(), step.layers.len(), "layer count mismatch");
        for (layer, g) in self.layers.iter_mut().zip(&step.layers) {
            layer.weight_mu.scaled_add(scale, &g.weight_mu);
            layer.weight_rho.scaled_add(scale, &g.weight_rho);
            layer.bias_mu.scaled_add(scale, &g.bias_mu);
            layer.bias_rho.scaled_add(scale, &g.bias_rho);
        }
    }
}

/// Output of one pathwise backward pass.
#[derive(Debug)]
pub struct BackwardOutput {
    /// Batch mean of the bounded cross-entropy.
    pub loss: f64,
    /// Batch mean of the zero-one loss under the same noise.
    pub zero_one: f64,
    pub loss_grads: ParamGrads,
    pub kl_grads: ParamGrads,
}

/// The two losses the certificates speak about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    ZeroOne,
    BoundedXe,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::ZeroOne => "zero_one",
            LossKind::BoundedXe => "bounded_xe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero_one" => Ok(LossKind::ZeroOne),
            "bounded_xe" => Ok(LossKind::BoundedXe),
            other => Err(Error::invalid(format!(
                "unknown loss kind `{other}` (expected zero_one or bounded_xe)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::invalid(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    Ok(())
}

pub(crate) fn check_p_min(p_min: f64, classes: usize) -> Result<()> {
    if !p_min.is_finite() || p_min <= 0.0 || p_min >= 1.0 / classes as f64 {
        return Err(Error::invalid(format!(
            "p_min = {p_min} must sit in (0, 1/{classes})"
        )));
    }
    Ok(())
}

/// Cross-entropy of the softmax probability of the true class, clamped
/// below at `p_min` and rescaled by `ln(1/p_min)` so the value lies in
/// `[0, 1]`.
pub fn bounded_xe(logits: ArrayView1<f64>, label: usize, p_min: f64) -> Result<f64> {
    let classes = logits.len();
    check_label(label, classes)?;
    check_p_min(p_min, classes)?;
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut expsum = 0.0;
    for &v in &logits {
        expsum += (v - max).exp();
    }
    let log_p_true = logits[label] - max - expsum.ln();
    Ok(log_p_true.max(p_min.ln()) / p_min.ln())
}

/// Zero when the largest logit sits at the true class, one otherwise.
/// Exact ties go to the lowest index.
pub fn zero_one(logits: ArrayView1<f64>, label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    let mut best = 0;
    for (j, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = j;
        }
    }
    Ok(if best == label { 0.0 } else { 1.0 })
}

/// Batch means of both losses over rows of logits.
pub fn batch_losses(logits: ArrayView2<f64>, labels: &[u8], p_min: f64) -> Result<(f64, f64)> {
    if logits.nrows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if logits.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut xe = 0.0;
    let mut zo = 0.0;
    for (row, &label) in logits.axis_iter(Axis(0)).zip(labels) {
        xe += bounded_xe(row, label as usize, p_min)?;
        zo += zero_one(row, label as usize)?;
    }
    let n = labels.len() as f64;
    Ok((xe / n, zo / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tiny_arch() -> Architecture {
        Architecture::new(vec![2, 3, 2]).unwrap()
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(vec![]).is_err());
        assert!(Architecture::new(vec![5]).is_err());
        assert!(Architecture::new(vec![5, 0, 2]).is_err());
        let arch = Architecture::new(vec![784, 100, 10]).unwrap();
        assert_eq!(arch.input_dim(), 784);
        assert_eq!(arch.output_dim(), 10);
        assert_eq!(arch.weight_layers(), 2);
        assert_eq!(arch.parameter_count(), 784 * 100 + 100 + 100 * 10 + 10);
    }

    #[test]
    fn softplus_round_trip() {
        for &s in &[0.02, 0.04, 0.5, 3.0] {
            assert_abs_diff_eq!(softplus(softplus_inv(s)), s, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(softplus_inv(0.04), -3.198_809_159_090_400_4, epsilon = 1e-13);
    }

    #[test]
    fn init_prior_posterior_equals_prior() {
        let post = init_prior(tiny_arch(), 0.04, 7).unwrap();
        for layer in post.layers() {
            assert_eq!(layer.weight_mu, layer.prior_weight_mu);
            assert!(layer.bias_mu.iter().all(|&b| b == 0.0));
            assert!(layer.prior_bias_mu.iter().all(|&b| b == 0.0));
            for &s in layer.weight_sigma().iter() {
                assert_abs_diff_eq!(s, 0.04, epsilon = 1e-14);
            }
        }
        assert!(post.gaussian_kl() <= 1e-9);
        assert!(init_prior(tiny_arch(), 0.0, 7).is_err());
        assert!(init_prior(tiny_arch(), -0.1, 7).is_err());
    }

    #[test]
    fn init_prior_is_seed_deterministic() {
        let a = init_prior(tiny_arch(), 0.04, 11).unwrap();
        let b = init_prior(tiny_arch(), 0.04, 11).unwrap();
        let c = init_prior(tiny_arch(), 0.04, 12).unwrap();
        assert_eq!(a.layers()[0].weight_mu, b.layers()[0].weight_mu);
        assert_ne!(a.layers()[0].weight_mu, c.layers()[0].weight_mu);
    }

    #[test]
    fn init_prior_variance_tracks_fan_in() {
        let arch = Architecture::new(vec![200, 50, 2]).unwrap();
        let post = init_prior(arch, 0.04, 3).unwrap();
        let w = &post.layers()[0].weight_mu;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.mapv(|v| (v - mean) * (v - mean)).sum() / n;
        let expect = 1.0 / 200.0;
        assert!(
            (var - expect).abs() < 0.2 * expect,
            "sample variance {var} vs {expect}"
        );
    }

    #[test]
    fn zero_noise_forward_uses_the_means() {
        let arch = tiny_arch();
        let post = init_prior(arch.clone(), 0.04, 5).unwrap();
        let x = array![0.3, -0.7];
        let logits = post.sample_forward(x.view(), &NoiseDraws::zeros(&arch)).unwrap();
        // Hand-rolled mean forward pass.
        let l0 = &post.layers()[0];
        let hidden = l0.weight_mu.dot(&x).mapv(|v| v.max(0.0));
        let l1 = &post.layers()[1];
        let expect = l1.weight_mu.dot(&hidden);
        assert_abs_diff_eq!(logits[0], expect[0], epsilon = 1e-12);
        assert_abs_diff_eq!(logits[1], expect[1], epsilon = 1e-12);
    }

    #[test]
    fn forward_is_deterministic_for_fixed_noise() {
        let arch = tiny_arch();
        let post = init_prior(arch.clone(), 0.5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noise = NoiseDraws::standard(&arch, &mut rng);
        let x = array![[0.3, -0.7], [1.0, 0.2]];
        let a = post.sample_forward_batch(x.view(), &noise).unwrap();
        let b = post.sample_forward_batch(x.view(), &noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let arch = tiny_arch();
        let post = init_prior(arch.clone(), 0.5, 5).unwrap();
        let x = array![[0.3, -0.7, 1.0]];
        assert!(post
            .sample_forward_batch(x.view(), &NoiseDraws::zeros(&arch))
            .is_err());
    }

    #[test]
    fn bounded_xe_reference_values() {
        // Two equal logits put probability 0.5 on the true class.
        let logits = array![0.7, 0.7];
        assert_abs_diff_eq!(
            bounded_xe(logits.view(), 0, 1e-4).unwrap(),
            0.075_257_498_915_995_299,
            epsilon = 1e-15
        );
        // A certain prediction costs nothing.
        let logits = array![500.0, 0.0];
        assert_abs_diff_eq!(bounded_xe(logits.view(), 0, 1e-4).unwrap(), 0.0, epsilon = 1e-12);
        // A hopeless prediction saturates the clamp at exactly 1.
        assert_eq!(bounded_xe(logits.view(), 1, 1e-4).unwrap(), 1.0);
    }

    #[test]
    fn bounded_xe_stays_in_unit_interval() {
        let cases = [
            array![3.0, -2.0, 0.5],
            array![-1e8, 1e8, 0.0],
            array![0.0, 0.0, 0.0],
        ];
        for logits in &cases {
            for label in 0..3 {
                let v = bounded_xe(logits.view(), label, 1e-4).unwrap();
                assert!((0.0..=1.0).contains(&v), "{v}");
            }
        }
    }

    #[test]
    fn bounded_xe_validation() {
        let logits = array![0.0, 1.0];
        assert!(bounded_xe(logits.view(), 2, 1e-4).is_err());
        assert!(bounded_xe(logits.view(), 0, 0.0).is_err());
        // p_min must stay below 1/classes.
        assert!(bounded_xe(logits.view(), 0, 0.5).is_err());
    }

    #[test]
    fn zero_one_ties_go_to_the_lowest_index() {
        let logits = array![1.0, 0.0, 1.0];
        assert_eq!(zero_one(logits.view(), 2).unwrap(), 1.0);
        assert_eq!(zero_one(logits.view(), 0).unwrap(), 0.0);
        assert_eq!(zero_one(logits.view(), 1).unwrap(), 1.0);
        assert!(zero_one(logits.view(), 3).is_err());
    }

    #[test]
    fn gaussian_kl_single_parameter_cases() {
        // One weight, one bias; the bias stays at the prior so only the
        // weight term contributes.
        let arch = Architecture::new(vec![1, 1]).unwrap();
        let rho0 = softplus_inv(1.0);
        let layer = LayerPosterior {
            weight_mu: array![[1.0]],
            weight_rho: array![[rho0]],
            bias_mu: array![0.0],
            bias_rho: array![rho0],
            prior_weight_mu: array![[0.0]],
            prior_bias_mu: array![0.0],
        };
        let post = GaussianPosterior::from_parts(arch.clone(), vec![layer], 1.0, 0).unwrap();
        assert_abs_diff_eq!(post.gaussian_kl(), 0.5, epsilon = 1e-12);

        // Mean at the prior, scale shrunk to sigma0 / e.
        let rho_small = softplus_inv(1.0 / std::f64::consts::E);
        let layer = LayerPosterior {
            weight_mu: array![[0.0]],
            weight_rho: array![[rho_small]],
            bias_mu: array![0.0],
            bias_rho: array![rho0],
            prior_weight_mu: array![[0.0]],
            prior_bias_mu: array![0.0],
        };
        let post = GaussianPosterior::from_parts(arch, vec![layer], 1.0, 0).unwrap();
        assert_abs_diff_eq!(post.gaussian_kl(), 0.567_667_641_618_306_35, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_kl_grows_when_posterior_moves() {
        let arch = tiny_arch();
        let mut post = init_prior(arch.clone(), 0.04, 5).unwrap();
        let mut step = ParamGrads::zeros(&arch);
        step.layers[0].weight_mu[[0, 0]] = 1.0;
        post.apply_update(&step, 0.1);
        assert!(post.gaussian_kl() > 1e-3);
    }

    #[test]
    fn backward_rejects_zero_one() {
        let arch = tiny_arch();
        let post = init_prior(arch.clone(), 0.04, 5).unwrap();
        let x = array![[0.3, -0.7]];
        let err = post
            .backward(x.view(), &[0], &NoiseDraws::zeros(&arch), LossKind::ZeroOne, 1e-4)
            .unwrap_err();
        assert!(matches!(err, Error::UnsupportedLoss("zero_one")));
    }

    #[test]
    fn backward_matches_finite_differences_spot_check() {
        let arch = Architecture::new(vec![2, 3, 2]).unwrap();
        let post = init_prior(arch.clone(), 0.5, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let noise = NoiseDraws::standard(&arch, &mut rng);
        let x = array![[0.9, -0.4], [0.1, 1.3], [-0.5, 0.8]];
        let labels = [0u8, 1, 0];
        let out = post
            .backward(x.view(), &labels, &noise, LossKind::BoundedXe, 1e-4)
            .unwrap();

        let h = 1e-6;
        let eval = |p: &GaussianPosterior| {
            let logits = p.sample_forward_batch(x.view(), &noise).unwrap();
            batch_losses(logits.view(), &labels, 1e-4).unwrap().0
        };
        // A handful of entries across both layers and both parameter
        // kinds; the full sweep lives in the acceptance suite.
        let probes = [(0usize, 0usize, 1usize), (0, 2, 0), (1, 1, 2)];
        for &(layer, r, c) in &probes {
            for rho_side in [false, true] {
                let mut probe = ParamGrads::zeros(&arch);
                if rho_side {
                    probe.layers[layer].weight_rho[[r, c]] = 1.0;
                } else {
                    probe.layers[layer].weight_mu[[r, c]] = 1.0;
                }
                let mut plus = post.clone();
                plus.apply_update(&probe, h);
                let mut minus = post.clone();
                minus.apply_update(&probe, -h);
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = if rho_side {
                    out.loss_grads.layers[layer].weight_rho[[r, c]]
                } else {
                    out.loss_grads.layers[layer].weight_mu[[r, c]]
                };
                let tol = 1e-5 * fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() <= tol,
                    "layer {layer} [{r},{c}] rho={rho_side}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn kl_grads_match_finite_differences() {
        let arch = tiny_arch();
        let mut post = init_prior(arch.clone(), 0.3, 21).unwrap();
        // Move off the prior so the gradients are nonzero.
        let mut shift = ParamGrads::zeros(&arch);
        shift.layers[0].weight_mu[[0, 0]] = 0.7;
        shift.layers[1].weight_rho[[1, 2]] = -0.4;
        shift.layers[0].bias_mu[1] = 0.2;
        post.apply_update(&shift, 1.0);

        let grads = post.kl_grads();
        let h = 1e-6;
        let probes: [(usize, bool); 2] = [(0, false), (1, true)];
        for &(layer, rho_side) in &probes {
            let mut probe = ParamGrads::zeros(&arch);
            if rho_side {
                probe.layers[layer].weight_rho[[1, 2]] = 1.0;
            } else {
                probe.layers[layer].weight_mu[[0, 0]] = 1.0;
            }
            let mut plus = post.clone();
            plus.apply_update(&probe, h);
            let mut minus = post.clone();
            minus.apply_update(&probe, -h);
            let fd = (plus.gaussian_kl() - minus.gaussian_kl()) / (2.0 * h);
            let an = if rho_side {
                grads.layers[layer].weight_rho[[1, 2]]
            } else {
                grads.layers[layer].weight_mu[[0, 0]]
            };
            assert_abs_diff_eq!(fd, an, epsilon = 1e-5 * an.abs().max(1.0));
        }
    }

    #[test]
    fn param_grads_algebra() {
        let arch = tiny_arch();
        let mut a = ParamGrads::zeros(&arch);
        a.layers[0].weight_mu[[0, 0]] = 2.0;
        let mut b = ParamGrads::zeros(&arch);
        b.layers[0].weight_mu[[0, 0]] = 3.0;
        b.layers[1].bias_rho[1] = 1.0;
        let c = ParamGrads::linear_combination(2.0, &a, -1.0, &b);
        assert_eq!(c.layers[0].weight_mu[[0, 0]], 1.0);
        assert_eq!(c.layers[1].bias_rho[1], -1.0);
        assert_abs_diff_eq!(a.dot(&b), 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.norm(), 10.0f64.sqrt(), epsilon = 1e-15);
    }
}
