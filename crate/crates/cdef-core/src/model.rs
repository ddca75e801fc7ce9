//! Minimal dense MLP: construction, forward pass, reverse-mode gradients
//! with respect to parameters and to the input.
//!
//! All arithmetic is f64 and every reduction runs sequentially over the flat
//! index, so a fixed (spec, seed, data) triple reproduces parameters and
//! gradients bit-exactly.

use crate::error::{Error, Result};
use crate::losses::{self, LossSpec};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Affine { in_dim: usize, out_dim: usize },
    Relu,
}

/// Weight is (out_dim x in_dim) row-major, bias is (out_dim).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    layers: Vec<LayerSpec>,
    params: Vec<AffineParams>,
    n_classes: usize,
    seed: u64,
    input_dim: usize,
}

/// Per-layer inputs plus logits and softmax probabilities of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input seen by each layer, aligned with the model's layer list.
    pub layer_inputs: Vec<Tensor>,
    pub logits: Tensor,
    pub probs: Tensor,
}

/// Gradients of a loss w.r.t. every affine layer's parameters, in layer order.
#[derive(Debug, Clone)]
pub struct ParamGradients {
    pub layers: Vec<AffineParams>,
}

/// Validates that affine dims chain and returns (input_dim, output_dim).
fn check_chain(spec: &[LayerSpec], n_classes: usize) -> Result<(usize, usize)> {
    let mut input_dim = None;
    let mut cur = 0usize;
    for (idx, layer) in spec.iter().enumerate() {
        match layer {
            LayerSpec::Affine { in_dim, out_dim } => {
                if *in_dim == 0 || *out_dim == 0 {
                    return Err(Error::InvalidConfig {
                        reason: format!("layer {}: zero dimension", idx),
                    });
                }
                if input_dim.is_none() {
                    input_dim = Some(*in_dim);
                } else if cur != *in_dim {
                    return Err(Error::LayerDimMismatch {
                        layer: idx,
                        expected: cur,
                        got: *in_dim,
                    });
                }
                cur = *out_dim;
            }
            LayerSpec::Relu => {
                if input_dim.is_none() {
                    return Err(Error::InvalidConfig {
                        reason: "first layer must be affine".to_string(),
                    });
                }
            }
        }
    }
    let input_dim = input_dim.ok_or_else(|| Error::InvalidConfig {
        reason: "model needs at least one affine layer".to_string(),
    })?;
    if cur != n_classes {
        return Err(Error::InvalidConfig {
            reason: format!(
                "final affine out_dim {} != n_classes {}",
                cur, n_classes
            ),
        });
    }
    Ok((input_dim, cur))
}

/// Builds a model with parameters drawn uniformly from [-s, s],
/// s = sqrt(6 / (in + out)) per affine layer; biases start at zero.
pub fn build_model(spec: &[LayerSpec], n_classes: usize, seed: u64) -> Result<Model> {
    if n_classes < 2 {
        return Err(Error::InvalidConfig {
            reason: format!("n_classes must be >= 2, got {}", n_classes),
        });
    }
    let (input_dim, _) = check_chain(spec, n_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for layer in spec {
        if let LayerSpec::Affine { in_dim, out_dim } = layer {
            let s = (6.0 / (*in_dim + *out_dim) as f64).sqrt();
            let w: Vec<f64> = (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-s..s))
                .collect();
            params.push(AffineParams {
                weight: Tensor::new(vec![*out_dim, *in_dim], w)?,
                bias: Tensor::zeros(vec![*out_dim]),
            });
        }
    }
    Ok(Model {
        layers: spec.to_vec(),
        params,
        n_classes,
        seed,
        input_dim,
    })
}

impl Model {
    /// Builds a model with explicit parameters (hand-set weights in tests
    /// and oracles).
    pub fn from_params(
        spec: &[LayerSpec],
        params: Vec<AffineParams>,
        n_classes: usize,
    ) -> Result<Model> {
        let (input_dim, _) = check_chain(spec, n_classes)?;
        let n_affine = spec
            .iter()
            .filter(|l| matches!(l, LayerSpec::Affine { .. }))
            .count();
        if params.len() != n_affine {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "expected {} affine parameter blocks, got {}",
                    n_affine,
                    params.len()
                ),
            });
        }
        Ok(Model {
            layers: spec.to_vec(),
            params,
            n_classes,
            seed: 0,
            input_dim,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[AffineParams] {
        &self.params
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("input of length {}", self.input_dim),
                got: format!("{}", x.len()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let mut affine_idx = 0;
        for layer in &self.layers {
            layer_inputs.push(cur.clone());
            match layer {
                LayerSpec::Affine { in_dim, out_dim } => {
                    let p = &self.params[affine_idx];
                    let w = p.weight.data();
                    let b = p.bias.data();
                    let xin = cur.data();
                    let mut out = vec![0.0; *out_dim];
                    for o in 0..*out_dim {
                        let mut acc = b[o];
                        let row = &w[o * in_dim..(o + 1) * in_dim];
                        for i in 0..*in_dim {
                            acc += row[i] * xin[i];
                        }
                        out[o] = acc;
                    }
                    cur = Tensor::new(vec![*out_dim], out)?;
                    affine_idx += 1;
                }
                LayerSpec::Relu => {
                    let out: Vec<f64> = cur.data().iter().map(|v| v.max(0.0)).collect();
                    cur = Tensor::new(vec![out.len()], out)?;
                }
            }
        }
        let logits = cur;
        let probs = softmax(logits.data());
        let probs = Tensor::new(vec![probs.len()], probs)?;
        Ok(ForwardTrace {
            layer_inputs,
            logits,
            probs,
        })
    }

    /// Argmax of the softmax probabilities; ties break to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let trace = self.forward(x)?;
        Ok(argmax(trace.probs.data()))
    }

    /// Backpropagates a gradient given at the logits through all layers.
    /// Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward_from_logits(
        &self,
        trace: &ForwardTrace,
        dlogits: &[f64],
    ) -> Result<(ParamGradients, Tensor)> {
        let mut grads: Vec<AffineParams> = self
            .params
            .iter()
            .map(|p| AffineParams {
                weight: Tensor::zeros(p.weight.shape().to_vec()),
                bias: Tensor::zeros(p.bias.shape().to_vec()),
            })
            .collect();
        let mut delta: Vec<f64> = dlogits.to_vec();
        let mut affine_idx = self.params.len();
        for (layer, input) in self.layers.iter().zip(&trace.layer_inputs).rev() {
            match layer {
                LayerSpec::Affine { in_dim, out_dim } => {
                    affine_idx -= 1;
                    let p = &self.params[affine_idx];
                    let g = &mut grads[affine_idx];
                    let xin = input.data();
                    {
                        let gw = g.weight.data_mut();
                        let gb = g.bias.data_mut();
                        for o in 0..*out_dim {
                            gb[o] = delta[o];
                            let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                            for i in 0..*in_dim {
                                row[i] = delta[o] * xin[i];
                            }
                        }
                    }
                    let w = p.weight.data();
                    let mut dx = vec![0.0; *in_dim];
                    for o in 0..*out_dim {
                        let row = &w[o * in_dim..(o + 1) * in_dim];
                        for i in 0..*in_dim {
                            dx[i] += row[i] * delta[o];
                        }
                    }
                    delta = dx;
                }
                LayerSpec::Relu => {
                    for (d, v) in delta.iter_mut().zip(input.data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
            }
        }
        let dx = Tensor::new(vec![delta.len()], delta)?;
        Ok((ParamGradients { layers: grads }, dx))
    }

    fn grads_for_sample(
        &self,
        x: &Tensor,
        label: usize,
        loss_spec: &LossSpec,
    ) -> Result<(ParamGradients, Tensor)> {
        if label >= self.n_classes {
            return Err(Error::LabelOutOfRange {
                label,
                n_classes: self.n_classes,
            });
        }
        let trace = self.forward(x)?;
        let dprobs = losses::loss_grad_probs(label, trace.probs.data(), loss_spec)?;
        let dlogits = dlogits_from_dprobs(trace.probs.data(), &dprobs);
        self.backward_from_logits(&trace, &dlogits)
    }

    /// Mean-over-batch gradient of the configured loss w.r.t. every parameter.
    pub fn loss_grad_params(
        &self,
        batch: &[(Tensor, usize)],
        loss_spec: &LossSpec,
    ) -> Result<ParamGradients> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut acc: Option<ParamGradients> = None;
        for (x, label) in batch {
            let (g, _) = self.grads_for_sample(x, *label, loss_spec)?;
            match &mut acc {
                None => acc = Some(g),
                Some(total) => {
                    for (t, s) in total.layers.iter_mut().zip(&g.layers) {
                        for (a, b) in t.weight.data_mut().iter_mut().zip(s.weight.data()) {
                            *a += b;
                        }
                        for (a, b) in t.bias.data_mut().iter_mut().zip(s.bias.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        let mut total = acc.expect("non-empty batch");
        let inv = 1.0 / batch.len() as f64;
        for layer in &mut total.layers {
            for v in layer.weight.data_mut() {
                *v *= inv;
            }
            for v in layer.bias.data_mut() {
                *v *= inv;
            }
        }
        Ok(total)
    }

    /// Gradient of the configured loss w.r.t. the input, same shape as `x`.
    pub fn loss_grad_input(
        &self,
        x: &Tensor,
        label: usize,
        loss_spec: &LossSpec,
    ) -> Result<Tensor> {
        let (_, dx) = self.grads_for_sample(x, label, loss_spec)?;
        Ok(dx)
    }

    /// In-place SGD update: params -= lr * grads.
    pub fn sgd_step(&mut self, grads: &ParamGradients, lr: f64) -> Result<()> {
        if grads.layers.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient blocks", self.params.len()),
                got: format!("{}", grads.layers.len()),
            });
        }
        for (p, g) in self.params.iter_mut().zip(&grads.layers) {
            if p.weight.len() != g.weight.len() || p.bias.len() != g.bias.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("({}, {})", p.weight.len(), p.bias.len()),
                    got: format!("({}, {})", g.weight.len(), g.bias.len()),
                });
            }
            for (a, b) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                *a -= lr * b;
            }
            for (a, b) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                *a -= lr * b;
            }
        }
        Ok(())
    }

    /// JSON document {layers, params, n_classes, seed, input_dim};
    /// round-trips f64 values exactly.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let model: Model = serde_json::from_str(text)?;
        check_chain(&model.layers, model.n_classes)?;
        Ok(model)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Chains dL/d(probs) through the softmax Jacobian:
/// dL/dz_j = p_j * (g_j - sum_k g_k p_k).
pub fn dlogits_from_dprobs(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let dot: f64 = dprobs.iter().zip(probs).map(|(g, p)| g * p).sum();
    probs
        .iter()
        .zip(dprobs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}
