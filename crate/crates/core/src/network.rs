//! Feed-forward networks built from fully-connected, relu, batch-norm, and
//! sigmoid layers, with exact reverse-mode differentiation and a guided
//! backpropagation mode.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPSILON: f64 = 1e-5;

/// One layer in a network description.
///
/// The first fully-connected layer infers its input width from the network
/// input dimension; later layers chain from whatever precedes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    FullyConnected { out_dim: usize },
    Relu,
    BatchNorm,
    Sigmoid,
}

/// An ordered layer list plus the input width it expects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    input_dim: usize,
    layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Parameter("network input dimension must be positive".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if let LayerSpec::FullyConnected { out_dim: 0 } = layer {
                return Err(Error::Parameter(format!(
                    "layer {i}: fully-connected output dimension must be positive"
                )));
            }
        }
        Ok(NetworkSpec { input_dim, layers })
    }

    /// Convenience builder for the common `fc relu fc relu ... fc` stack.
    pub fn mlp(input_dim: usize, hidden: &[usize], out_dim: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() * 2 + 1);
        for &h in hidden {
            layers.push(LayerSpec::FullyConnected { out_dim: h });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::FullyConnected { out_dim });
        NetworkSpec::new(input_dim, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Width of the data entering each layer, plus the final output width.
    pub fn widths(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len() + 1);
        let mut dim = self.input_dim;
        dims.push(dim);
        for layer in &self.layers {
            if let LayerSpec::FullyConnected { out_dim } = layer {
                dim = *out_dim;
            }
            dims.push(dim);
        }
        dims
    }

    pub fn output_dim(&self) -> usize {
        *self.widths().last().expect("widths is never empty")
    }
}

/// Parameters attached to one layer.
#[derive(Debug, Clone)]
pub enum LayerParams {
    /// Weight is `[in, out]` so a batch forward is `x . weight + bias`.
    Dense { weight: Tensor, bias: Tensor },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    Stateless,
}

/// Whether batch norm uses batch statistics (and updates running ones) or
/// the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// Gradient flavor for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    /// Exact reverse-mode gradients.
    Standard,
    /// Each relu additionally blocks nonpositive incoming gradients:
    /// `grad_in = grad_out * [pre > 0] * [grad_out > 0]`.
    Guided,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Dense { input: Tensor },
    Relu { pre: Tensor },
    Sigmoid { output: Tensor },
    BatchNorm {
        x_hat: Tensor,
        inv_std: Tensor,
        training: bool,
    },
}

/// Cached activations from one forward pass, consumed by `backward`.
///
/// A tape is only valid for the exact network state and batch that produced
/// it; mismatches are reported as stale-tape errors.
#[derive(Debug, Clone)]
pub struct GradientTape {
    batch: usize,
    input_dim: usize,
    output_dim: usize,
    caches: Vec<LayerCache>,
}

impl GradientTape {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Per-layer parameter gradients, mirroring `LayerParams`.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Dense { d_weight: Tensor, d_bias: Tensor },
    BatchNorm { d_gamma: Tensor, d_beta: Tensor },
    None,
}

impl LayerGrads {
    /// Zero gradients shaped like the given parameters.
    pub fn zeros_like(params: &LayerParams) -> Self {
        match params {
            LayerParams::Dense { weight, bias } => LayerGrads::Dense {
                d_weight: Tensor::zeros(weight.shape()),
                d_bias: Tensor::zeros(bias.shape()),
            },
            LayerParams::BatchNorm { gamma, beta, .. } => LayerGrads::BatchNorm {
                d_gamma: Tensor::zeros(gamma.shape()),
                d_beta: Tensor::zeros(beta.shape()),
            },
            LayerParams::Stateless => LayerGrads::None,
        }
    }
}

/// A feed-forward network: spec, parameters, and forward/backward modes.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<LayerParams>,
    mode: Mode,
}

impl Network {
    /// Initializes parameters: fully-connected weights uniform in
    /// `±sqrt(6 / (fan_in + fan_out))` with zero biases; batch norm starts as
    /// the identity map (gamma 1, beta 0, running mean 0, running var 1).
    pub fn new(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        let widths = spec.widths();
        let mut params = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let in_dim = widths[i];
            match layer {
                LayerSpec::FullyConnected { out_dim } => {
                    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
                    let data: Vec<f64> = (0..in_dim * out_dim)
                        .map(|_| rng.uniform(-limit, limit))
                        .collect();
                    params.push(LayerParams::Dense {
                        weight: Tensor::new(vec![in_dim, *out_dim], data)?,
                        bias: Tensor::zeros(&[*out_dim]),
                    });
                }
                LayerSpec::BatchNorm => params.push(LayerParams::BatchNorm {
                    gamma: Tensor::full(&[in_dim], 1.0),
                    beta: Tensor::zeros(&[in_dim]),
                    running_mean: Tensor::zeros(&[in_dim]),
                    running_var: Tensor::full(&[in_dim], 1.0),
                }),
                LayerSpec::Relu | LayerSpec::Sigmoid => params.push(LayerParams::Stateless),
            }
        }
        Ok(Network {
            spec,
            params,
            mode: Mode::Inference,
        })
    }

    pub fn from_parts(spec: NetworkSpec, params: Vec<LayerParams>) -> Result<Self> {
        let net = Network {
            spec,
            params,
            mode: Mode::Inference,
        };
        net.validate_params()?;
        Ok(net)
    }

    fn validate_params(&self) -> Result<()> {
        if self.params.len() != self.spec.layers.len() {
            return Err(Error::Consistency(format!(
                "{} parameter slots for {} layers",
                self.params.len(),
                self.spec.layers.len()
            )));
        }
        let widths = self.spec.widths();
        for (i, (layer, params)) in self.spec.layers.iter().zip(&self.params).enumerate() {
            let in_dim = widths[i];
            match (layer, params) {
                (LayerSpec::FullyConnected { out_dim }, LayerParams::Dense { weight, bias }) => {
                    if weight.shape() != [in_dim, *out_dim] || bias.shape() != [*out_dim] {
                        return Err(Error::Shape(format!(
                            "layer {i}: dense parameters {:?}/{:?} do not match [{in_dim}, {out_dim}]",
                            weight.shape(),
                            bias.shape()
                        )));
                    }
                }
                (LayerSpec::BatchNorm, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
                    for t in [gamma, beta, running_mean, running_var] {
                        if t.shape() != [in_dim] {
                            return Err(Error::Shape(format!(
                                "layer {i}: batch norm parameter shape {:?} does not match [{in_dim}]",
                                t.shape()
                            )));
                        }
                    }
                    if running_var.data().iter().any(|&v| v <= 0.0) {
                        return Err(Error::Parameter(format!(
                            "layer {i}: running variance must stay positive"
                        )));
                    }
                }
                (LayerSpec::Relu | LayerSpec::Sigmoid, LayerParams::Stateless) => {}
                _ => {
                    return Err(Error::Consistency(format!(
                        "layer {i}: parameter kind does not match layer kind"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    /// Clones all parameters, including batch norm running statistics.
    pub fn snapshot_params(&self) -> Vec<LayerParams> {
        self.params.clone()
    }

    pub fn restore_params(&mut self, params: Vec<LayerParams>) -> Result<()> {
        let old = std::mem::replace(&mut self.params, params);
        if let Err(e) = self.validate_params() {
            self.params = old;
            return Err(e);
        }
        Ok(())
    }

    /// True when both networks have identical specs and bit-identical
    /// parameters (running statistics included).
    pub fn params_bits_eq(&self, other: &Network) -> bool {
        if self.spec != other.spec {
            return false;
        }
        self.params.iter().zip(&other.params).all(|(a, b)| match (a, b) {
            (
                LayerParams::Dense { weight: w1, bias: b1 },
                LayerParams::Dense { weight: w2, bias: b2 },
            ) => w1.bits_eq(w2) && b1.bits_eq(b2),
            (
                LayerParams::BatchNorm { gamma: g1, beta: be1, running_mean: m1, running_var: v1 },
                LayerParams::BatchNorm { gamma: g2, beta: be2, running_mean: m2, running_var: v2 },
            ) => g1.bits_eq(g2) && be1.bits_eq(be2) && m1.bits_eq(m2) && v1.bits_eq(v2),
            (LayerParams::Stateless, LayerParams::Stateless) => true,
            _ => false,
        })
    }

    /// Mutable references to every optimizer-updatable tensor, in layer
    /// order: dense weight then bias, batch norm gamma then beta. Running
    /// statistics are forward-pass state, not optimizer targets.
    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for params in &mut self.params {
            match params {
                LayerParams::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                LayerParams::Stateless => {}
            }
        }
        out
    }

    /// Gradient tensors in the same order as [`Network::trainable_tensors_mut`].
    pub fn flatten_grads(grads: &[LayerGrads]) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for g in grads {
            match g {
                LayerGrads::Dense { d_weight, d_bias } => {
                    out.push(d_weight);
                    out.push(d_bias);
                }
                LayerGrads::BatchNorm { d_gamma, d_beta } => {
                    out.push(d_gamma);
                    out.push(d_beta);
                }
                LayerGrads::None => {}
            }
        }
        out
    }

    /// Forward pass for a `[batch, d]` input, honoring the network mode.
    ///
    /// In training mode batch norm normalizes with batch statistics and
    /// updates its running statistics in place; in inference mode it applies
    /// the stored running statistics and the pass leaves the network
    /// untouched.
    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, GradientTape)> {
        let mode = self.mode;
        forward_impl(&self.spec, &mut self.params, mode, x)
    }

    /// Inference-mode forward pass through a shared reference.
    ///
    /// Errors if the network is in training mode, where a forward pass must
    /// mutate running statistics.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, GradientTape)> {
        if self.mode != Mode::Inference {
            return Err(Error::InferenceModeRequired("infer"));
        }
        // Inference never touches parameters; the clone-free path needs the
        // mutable-looking signature only for the training branch.
        let mut params_view = self.params.clone();
        forward_impl(&self.spec, &mut params_view, Mode::Inference, x)
    }

    /// Reverse-mode gradients of `sum(logits * upstream)` with respect to
    /// every parameter and the input batch.
    pub fn backward(
        &self,
        tape: &GradientTape,
        upstream: &Tensor,
        mode: BackwardMode,
    ) -> Result<(Vec<LayerGrads>, Tensor)> {
        let (batch, c) = upstream.dims2()?;
        if tape.caches.len() != self.spec.layers.len()
            || tape.input_dim != self.spec.input_dim
            || tape.batch != batch
            || tape.output_dim != c
        {
            return Err(Error::StaleTape(format!(
                "tape for batch {} / dims {}->{} used with network {}->{} and upstream [{batch}, {c}]",
                tape.batch,
                tape.input_dim,
                tape.output_dim,
                self.spec.input_dim,
                self.spec.output_dim()
            )));
        }

        let mut grad = upstream.clone();
        let mut param_grads: Vec<LayerGrads> = Vec::with_capacity(self.params.len());
        param_grads.resize_with(self.params.len(), || LayerGrads::None);

        for idx in (0..self.spec.layers.len()).rev() {
            match (&self.spec.layers[idx], &self.params[idx], &tape.caches[idx]) {
                (
                    LayerSpec::FullyConnected { .. },
                    LayerParams::Dense { weight, .. },
                    LayerCache::Dense { input },
                ) => {
                    let d_weight = matmul_tn(input, &grad)?;
                    let (batch, out_dim) = grad.dims2()?;
                    let mut d_bias = vec![0.0; out_dim];
                    for i in 0..batch {
                        for (b, &g) in d_bias.iter_mut().zip(grad.row(i)) {
                            *b += g;
                        }
                    }
                    param_grads[idx] = LayerGrads::Dense {
                        d_weight,
                        d_bias: Tensor::new(vec![out_dim], d_bias)?,
                    };
                    grad = matmul_nt(&grad, weight)?;
                }
                (LayerSpec::Relu, _, LayerCache::Relu { pre }) => {
                    grad = match mode {
                        BackwardMode::Standard => {
                            grad.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 })?
                        }
                        BackwardMode::Guided => {
                            grad.zip_map(pre, |g, p| if p > 0.0 && g > 0.0 { g } else { 0.0 })?
                        }
                    };
                }
                (LayerSpec::Sigmoid, _, LayerCache::Sigmoid { output }) => {
                    grad = grad.zip_map(output, |g, s| g * s * (1.0 - s))?;
                }
                (
                    LayerSpec::BatchNorm,
                    LayerParams::BatchNorm { gamma, .. },
                    LayerCache::BatchNorm { x_hat, inv_std, training },
                ) => {
                    let (batch, features) = grad.dims2()?;
                    let mut d_gamma = vec![0.0; features];
                    let mut d_beta = vec![0.0; features];
                    for i in 0..batch {
                        let g_row = grad.row(i);
                        let xh_row = x_hat.row(i);
                        for j in 0..features {
                            d_gamma[j] += g_row[j] * xh_row[j];
                            d_beta[j] += g_row[j];
                        }
                    }
                    let mut new_grad = Tensor::zeros(&[batch, features]);
                    if *training {
                        // Full gradient through the batch statistics:
                        // dx = gamma * inv_std / N * (N*dy - sum(dy) - x_hat * sum(dy*x_hat))
                        let n = batch as f64;
                        for i in 0..batch {
                            let g_row = grad.row(i);
                            let xh_row = x_hat.row(i);
                            let out_row = new_grad.row_mut(i);
                            for j in 0..features {
                                out_row[j] = gamma.data()[j] * inv_std.data()[j] / n
                                    * (n * g_row[j] - d_beta[j] - xh_row[j] * d_gamma[j]);
                            }
                        }
                    } else {
                        // Running statistics are constants: an affine map.
                        for i in 0..batch {
                            let g_row = grad.row(i);
                            let out_row = new_grad.row_mut(i);
                            for j in 0..features {
                                out_row[j] = g_row[j] * gamma.data()[j] * inv_std.data()[j];
                            }
                        }
                    }
                    param_grads[idx] = LayerGrads::BatchNorm {
                        d_gamma: Tensor::new(vec![features], d_gamma)?,
                        d_beta: Tensor::new(vec![features], d_beta)?,
                    };
                    grad = new_grad;
                }
                _ => {
                    return Err(Error::StaleTape(format!(
                        "layer {idx}: cache kind does not match layer kind"
                    )));
                }
            }
        }
        Ok((param_grads, grad))
    }
}

fn forward_impl(
    spec: &NetworkSpec,
    params: &mut [LayerParams],
    mode: Mode,
    x: &Tensor,
) -> Result<(Tensor, GradientTape)> {
    let (batch, d) = x.dims2()?;
    if d != spec.input_dim {
        return Err(Error::Shape(format!(
            "input has {d} features but the network expects {}",
            spec.input_dim
        )));
    }
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut current = x.clone();
    for (layer, layer_params) in spec.layers.iter().zip(params.iter_mut()) {
        match (layer, layer_params) {
            (LayerSpec::FullyConnected { out_dim }, LayerParams::Dense { weight, bias }) => {
                let mut out = matmul(&current, weight)?;
                for i in 0..batch {
                    for (o, &b) in out.row_mut(i).iter_mut().zip(bias.data()) {
                        *o += b;
                    }
                }
                debug_assert_eq!(out.shape(), &[batch, *out_dim]);
                caches.push(LayerCache::Dense { input: current });
                current = out;
            }
            (LayerSpec::Relu, LayerParams::Stateless) => {
                let out = current.map(|v| if v > 0.0 { v } else { 0.0 });
                caches.push(LayerCache::Relu { pre: current });
                current = out;
            }
            (LayerSpec::Sigmoid, LayerParams::Stateless) => {
                let out = current.map(|v| 1.0 / (1.0 + (-v).exp()));
                caches.push(LayerCache::Sigmoid { output: out.clone() });
                current = out;
            }
            (
                LayerSpec::BatchNorm,
                LayerParams::BatchNorm { gamma, beta, running_mean, running_var },
            ) => {
                let (_, features) = current.dims2()?;
                let (mean, var) = match mode {
                    Mode::Training => {
                        let n = batch as f64;
                        let mut mean = vec![0.0; features];
                        for i in 0..batch {
                            for (m, &v) in mean.iter_mut().zip(current.row(i)) {
                                *m += v;
                            }
                        }
                        for m in mean.iter_mut() {
                            *m /= n;
                        }
                        // Biased variance, both for normalization and for the
                        // running estimate.
                        let mut var = vec![0.0; features];
                        for i in 0..batch {
                            for j in 0..features {
                                let diff = current.row(i)[j] - mean[j];
                                var[j] += diff * diff;
                            }
                        }
                        for v in var.iter_mut() {
                            *v /= n;
                        }
                        for j in 0..features {
                            let rm = &mut running_mean.data_mut()[j];
                            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[j];
                            let rv = &mut running_var.data_mut()[j];
                            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[j];
                        }
                        (mean, var)
                    }
                    Mode::Inference => (running_mean.data().to_vec(), running_var.data().to_vec()),
                };
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
                let mut x_hat = Tensor::zeros(&[batch, features]);
                let mut out = Tensor::zeros(&[batch, features]);
                for i in 0..batch {
                    for j in 0..features {
                        let xh = (current.row(i)[j] - mean[j]) * inv_std[j];
                        x_hat.row_mut(i)[j] = xh;
                        out.row_mut(i)[j] = gamma.data()[j] * xh + beta.data()[j];
                    }
                }
                caches.push(LayerCache::BatchNorm {
                    x_hat,
                    inv_std: Tensor::new(vec![features], inv_std)?,
                    training: mode == Mode::Training,
                });
                current = out;
            }
            _ => {
                return Err(Error::Consistency(
                    "layer parameters out of sync with spec".into(),
                ));
            }
        }
    }
    let tape = GradientTape {
        batch,
        input_dim: spec.input_dim,
        output_dim: spec.output_dim(),
        caches,
    };
    Ok((current, tape))
}

/// One-hot upstream for selecting a single logit per row.
pub fn one_hot_upstream(batch: usize, num_classes: usize, targets: &[usize]) -> Result<Tensor> {
    if targets.len() != batch {
        return Err(Error::Consistency(format!(
            "{} targets for batch {batch}",
            targets.len()
        )));
    }
    let mut out = Tensor::zeros(&[batch, num_classes]);
    for (i, &t) in targets.iter().enumerate() {
        if t >= num_classes {
            return Err(Error::Target {
                target: t,
                num_classes,
            });
        }
        out.row_mut(i)[t] = 1.0;
    }
    Ok(out)
}
