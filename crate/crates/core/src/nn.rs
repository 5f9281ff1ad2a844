//! Dense feed-forward networks with manual reverse-mode gradients.
//!
//! The engine is deliberately small: affine layers with tanh or identity
//! activations, flat `f64` parameter vectors in a canonical order, SGD with
//! momentum and Adam, and a functional mode that returns the gradient of a
//! data loss with respect to an externally supplied parameter vector. That
//! last piece is what lets a meta-network backpropagate through the
//! parameters it regresses.
//!
//! Canonical flattening order: layer by layer, each layer's weight matrix in
//! row-major order (rows are output units) followed by its bias vector.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::Stream;
use crate::sample::Sample;
use crate::{Error, Result};

/// Activation applied after an affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => math::tanh(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed in terms of the activation output.
    pub(crate) fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Architecture of a dense network: layer widths plus one activation per
/// hidden layer. The output layer is always identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    layer_dims: Vec<usize>,
    hidden_activations: Vec<Activation>,
}

/// Shape of one affine layer inside a spec.
#[derive(Debug, Clone)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Range of the weight block in the flat parameter vector.
    pub weights: core::ops::Range<usize>,
    /// Range of the bias block in the flat parameter vector.
    pub biases: core::ops::Range<usize>,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, hidden_activations: Vec<Activation>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidConfig(alloc::format!(
                "a network needs at least 2 layer dims, got {}",
                layer_dims.len()
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("layer dims must be positive".into()));
        }
        let hidden = layer_dims.len() - 2;
        if hidden_activations.len() != hidden {
            return Err(Error::DimensionMismatch {
                context: "hidden activation count",
                expected: hidden,
                found: hidden_activations.len(),
            });
        }
        Ok(MlpSpec {
            layer_dims,
            hidden_activations,
        })
    }

    /// Spec with tanh on every hidden layer (the default everywhere here).
    pub fn tanh_hidden(layer_dims: Vec<usize>) -> Result<Self> {
        let hidden = layer_dims.len().saturating_sub(2);
        MlpSpec::new(layer_dims, vec![Activation::Tanh; hidden])
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn hidden_activations(&self) -> &[Activation] {
        &self.hidden_activations
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Affine layers with their parameter ranges in canonical order.
    pub fn layers(&self) -> Vec<LayerShape> {
        let mut out = Vec::with_capacity(self.layer_dims.len() - 1);
        let mut offset = 0;
        let last = self.layer_dims.len() - 2;
        for (l, w) in self.layer_dims.windows(2).enumerate() {
            let (in_dim, out_dim) = (w[0], w[1]);
            let wlen = in_dim * out_dim;
            let activation = if l == last {
                Activation::Identity
            } else {
                self.hidden_activations[l]
            };
            out.push(LayerShape {
                in_dim,
                out_dim,
                activation,
                weights: offset..offset + wlen,
                biases: offset + wlen..offset + wlen + out_dim,
            });
            offset += wlen + out_dim;
        }
        out
    }

    /// FNV-1a hash over the canonical encoding of the spec. Parameter
    /// vectors carry this value so shape mismatches fail loudly.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for &d in &self.layer_dims {
            for b in (d as u64).to_le_bytes() {
                eat(b);
            }
        }
        eat(0xff);
        for &a in &self.hidden_activations {
            eat(a.tag());
        }
        h
    }
}

/// Flat parameter vector tied to the spec that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    spec_fingerprint: u64,
}

impl ParamVector {
    /// Wraps values for a spec, checking length and finiteness.
    pub fn for_spec(spec: &MlpSpec, values: Vec<f64>) -> Result<Self> {
        Self::with_fingerprint(values, spec.param_count(), spec.fingerprint())
    }

    /// Wraps values for an arbitrary fingerprint (used for concatenated
    /// encoder-decoder vectors and meta-network blocks).
    pub fn with_fingerprint(values: Vec<f64>, expected_len: usize, fp: u64) -> Result<Self> {
        if values.len() != expected_len {
            return Err(Error::DimensionMismatch {
                context: "parameter vector length",
                expected: expected_len,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(ParamVector {
            values,
            spec_fingerprint: fp,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn fingerprint(&self) -> u64 {
        self.spec_fingerprint
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn check_spec(&self, spec: &MlpSpec, context: &'static str) -> Result<()> {
        if self.spec_fingerprint != spec.fingerprint() || self.values.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                context,
                expected: spec.param_count(),
                found: self.values.len(),
            });
        }
        Ok(())
    }
}

/// Fingerprint of a concatenated (encoder, decoder) parameter vector.
pub fn pair_fingerprint(enc: &MlpSpec, dec: &MlpSpec) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in [enc.fingerprint(), dec.fingerprint()] {
        for b in part.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Splits a flat parameter vector into per-layer (weights, biases) pairs.
pub fn unflatten(spec: &MlpSpec, params: &ParamVector) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    params.check_spec(spec, "unflatten")?;
    let v = params.values();
    Ok(spec
        .layers()
        .into_iter()
        .map(|l| (v[l.weights].to_vec(), v[l.biases].to_vec()))
        .collect())
}

/// Rebuilds the flat vector from per-layer pairs.
pub fn flatten(spec: &MlpSpec, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<ParamVector> {
    let mut values = Vec::with_capacity(spec.param_count());
    for (w, b) in layers {
        values.extend_from_slice(w);
        values.extend_from_slice(b);
    }
    ParamVector::for_spec(spec, values)
}

/// Deterministic initialization: weights uniform in [-a, a] with
/// a = sqrt(6 / (fan_in + fan_out)), biases zero.
pub fn init(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = Stream::new(seed);
    let mut values = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let bound = math::sqrt(6.0 / (layer.in_dim + layer.out_dim) as f64);
        for w in &mut values[layer.weights] {
            *w = rng.uniform(-bound, bound);
        }
        // biases stay zero
    }
    ParamVector {
        values,
        spec_fingerprint: spec.fingerprint(),
    }
}

fn check_input(spec: &MlpSpec, input: &[f64]) -> Result<()> {
    if input.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "network input",
            expected: spec.input_dim(),
            found: input.len(),
        });
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network input"));
    }
    Ok(())
}

/// Forward pass over raw parameter storage. `params` must have the spec's
/// canonical length; no checks are repeated here.
pub(crate) fn forward_raw(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
    let mut a = input.to_vec();
    for layer in spec.layers() {
        let w = &params[layer.weights];
        let b = &params[layer.biases];
        let mut next = Vec::with_capacity(layer.out_dim);
        for o in 0..layer.out_dim {
            let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
            next.push(layer.activation.apply(b[o] + math::dot(row, &a)));
        }
        a = next;
    }
    a
}

/// Forward pass.
pub fn forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    params.check_spec(spec, "forward parameters")?;
    check_input(spec, input)?;
    Ok(forward_raw(spec, params.values(), input))
}

/// Forward pass keeping every layer's post-activation output (index 0 is the
/// input itself). Needed by the backward pass.
pub(crate) fn forward_cached(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(spec.layer_dims().len());
    acts.push(input.to_vec());
    for layer in spec.layers() {
        let w = &params[layer.weights];
        let b = &params[layer.biases];
        let a = acts.last().unwrap();
        let mut next = Vec::with_capacity(layer.out_dim);
        for o in 0..layer.out_dim {
            let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
            next.push(layer.activation.apply(b[o] + math::dot(row, a)));
        }
        acts.push(next);
    }
    acts
}

/// Reverse-mode pass over raw storage given cached activations.
///
/// Computes gradients of `<upstream, output>`: writes the parameter gradient
/// into `param_grad` (accumulating) and returns the input gradient.
pub(crate) fn backward_raw(
    spec: &MlpSpec,
    params: &[f64],
    acts: &[Vec<f64>],
    upstream: &[f64],
    param_grad: &mut [f64],
) -> Vec<f64> {
    let layers = spec.layers();
    let mut delta = upstream.to_vec();
    for (l, layer) in layers.iter().enumerate().rev() {
        let out_act = &acts[l + 1];
        // dz = dL/d(pre-activation)
        for (d, &a) in delta.iter_mut().zip(out_act) {
            *d *= layer.activation.grad_from_output(a);
        }
        let input_act = &acts[l];
        let w = &params[layer.weights.clone()];
        let wg = &mut param_grad[layer.weights.clone()];
        let mut prev_delta = vec![0.0; layer.in_dim];
        for o in 0..layer.out_dim {
            let dz = delta[o];
            let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
            let grow = &mut wg[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (g, &x) in grow.iter_mut().zip(input_act) {
                *g += dz * x;
            }
            for (p, &wv) in prev_delta.iter_mut().zip(row) {
                *p += dz * wv;
            }
        }
        for (g, &dz) in param_grad[layer.biases.clone()].iter_mut().zip(&delta) {
            *g += dz;
        }
        delta = prev_delta;
    }
    delta
}

/// Exact reverse-mode gradients of `<upstream, forward(input)>` with respect
/// to the input and the parameters.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, ParamVector)> {
    params.check_spec(spec, "backward parameters")?;
    check_input(spec, input)?;
    if upstream.len() != spec.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "backward upstream",
            expected: spec.output_dim(),
            found: upstream.len(),
        });
    }
    let acts = forward_cached(spec, params.values(), input);
    let mut param_grad = vec![0.0; spec.param_count()];
    let input_grad = backward_raw(spec, params.values(), &acts, upstream, &mut param_grad);
    Ok((
        input_grad,
        ParamVector {
            values: param_grad,
            spec_fingerprint: spec.fingerprint(),
        },
    ))
}

/// Which update rule an [`OptimizerState`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    SgdMomentum,
    Adam,
}

/// Hyperparameters of an optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimHyper {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimHyper {
    /// Adam with the momentum factor used throughout this crate.
    pub fn adam(lr: f64, beta1: f64) -> Self {
        OptimHyper {
            kind: OptimKind::Adam,
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum(lr: f64, beta1: f64) -> Self {
        OptimHyper {
            kind: OptimKind::SgdMomentum,
            lr,
            beta1,
            beta2: 0.0,
            eps: 0.0,
        }
    }
}

/// Mutable optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: OptimHyper,
    pub step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl OptimizerState {
    pub fn new(hyper: OptimHyper, dim: usize) -> Self {
        let second = match hyper.kind {
            OptimKind::Adam => vec![0.0; dim],
            OptimKind::SgdMomentum => Vec::new(),
        };
        OptimizerState {
            hyper,
            step: 0,
            first_moment: vec![0.0; dim],
            second_moment: second,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.first_moment.len()
    }

    /// Applies one update in place. Gradients are validated up front so the
    /// update loops stay branch-free.
    pub fn step_in_place(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::DimensionMismatch {
                context: "optimizer step",
                expected: self.first_moment.len(),
                found: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        let h = self.hyper;
        match h.kind {
            OptimKind::SgdMomentum => {
                for ((p, m), &g) in params.iter_mut().zip(&mut self.first_moment).zip(grads) {
                    *m = h.beta1 * *m + g;
                    *p -= h.lr * *m;
                }
            }
            OptimKind::Adam => {
                self.beta1_pow *= h.beta1;
                self.beta2_pow *= h.beta2;
                let c1 = 1.0 / (1.0 - self.beta1_pow);
                let c2 = 1.0 / (1.0 - self.beta2_pow);
                let moments = self.first_moment.iter_mut().zip(&mut self.second_moment);
                for ((p, (m, v)), &g) in params.iter_mut().zip(moments).zip(grads) {
                    *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                    *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                    *p -= h.lr * (*m * c1) / (math::sqrt(*v * c2) + h.eps);
                }
            }
        }
        Ok(())
    }
}

/// Pure optimizer step: returns the updated state and parameters, leaving
/// the inputs untouched.
pub fn optimizer_step(
    state: &OptimizerState,
    params: &ParamVector,
    grads: &ParamVector,
) -> Result<(OptimizerState, ParamVector)> {
    let mut new_state = state.clone();
    let mut new_params = params.values().to_vec();
    new_state.step_in_place(&mut new_params, grads.values())?;
    Ok((
        new_state,
        ParamVector {
            values: new_params,
            spec_fingerprint: params.spec_fingerprint,
        },
    ))
}

/// Loss applied by [`functional_loss_and_grad`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean over output components of the squared error, averaged over the
    /// batch.
    Mse,
}

/// Loss and gradient of an encoder-decoder chain with respect to a combined
/// parameter vector `concat(encoder, decoder)`.
///
/// The gradient has the same length and canonical layout as the combined
/// vector, which is exactly what a meta-network needs to chain its own
/// backward pass through regressed parameters.
pub fn functional_loss_and_grad(
    enc: &MlpSpec,
    dec: &MlpSpec,
    combined: &ParamVector,
    batch: &[Sample],
    loss_kind: LossKind,
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let expected = enc.param_count() + dec.param_count();
    let fp = pair_fingerprint(enc, dec);
    if combined.len() != expected || combined.fingerprint() != fp {
        return Err(Error::DimensionMismatch {
            context: "combined parameter vector",
            expected,
            found: combined.len(),
        });
    }
    if enc.output_dim() != dec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "encoder output vs decoder input",
            expected: dec.input_dim(),
            found: enc.output_dim(),
        });
    }
    let LossKind::Mse = loss_kind;
    let (enc_params, dec_params) = combined.values().split_at(enc.param_count());
    let out_dim = dec.output_dim();
    let mut grad = vec![0.0; expected];
    let (enc_grad, dec_grad) = grad.split_at_mut(enc.param_count());
    let mut loss_sum = 0.0;
    for sample in batch {
        check_input(enc, &sample.x)?;
        if sample.y.len() != out_dim {
            return Err(Error::DimensionMismatch {
                context: "sample target",
                expected: out_dim,
                found: sample.y.len(),
            });
        }
        let enc_acts = forward_cached(enc, enc_params, &sample.x);
        let dec_acts = forward_cached(dec, dec_params, enc_acts.last().unwrap());
        let pred = dec_acts.last().unwrap();
        let mut upstream = Vec::with_capacity(out_dim);
        let inv_dim = 1.0 / out_dim as f64;
        for (p, t) in pred.iter().zip(&sample.y) {
            let diff = p - t;
            loss_sum += diff * diff * inv_dim;
            upstream.push(2.0 * diff * inv_dim);
        }
        let mid_grad = backward_raw(dec, dec_params, &dec_acts, &upstream, dec_grad);
        backward_raw(enc, enc_params, &enc_acts, &mid_grad, enc_grad);
    }
    let inv_batch = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= inv_batch;
    }
    let loss = loss_sum * inv_batch;
    if !loss.is_finite() {
        return Err(Error::NonFinite("functional loss"));
    }
    Ok((
        loss,
        ParamVector {
            values: grad,
            spec_fingerprint: fp,
        },
    ))
}

/// Forward-only companion of [`functional_loss_and_grad`]: the mean loss of
/// the encoder-decoder chain on a batch, without gradients.
pub fn functional_loss(
    enc: &MlpSpec,
    dec: &MlpSpec,
    combined: &ParamVector,
    batch: &[Sample],
    loss_kind: LossKind,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let expected = enc.param_count() + dec.param_count();
    if combined.len() != expected || combined.fingerprint() != pair_fingerprint(enc, dec) {
        return Err(Error::DimensionMismatch {
            context: "combined parameter vector",
            expected,
            found: combined.len(),
        });
    }
    let LossKind::Mse = loss_kind;
    let (enc_params, dec_params) = combined.values().split_at(enc.param_count());
    let out_dim = dec.output_dim();
    let inv_dim = 1.0 / out_dim as f64;
    let mut loss_sum = 0.0;
    for sample in batch {
        check_input(enc, &sample.x)?;
        if sample.y.len() != out_dim {
            return Err(Error::DimensionMismatch {
                context: "sample target",
                expected: out_dim,
                found: sample.y.len(),
            });
        }
        let pred = forward_raw(dec, dec_params, &forward_raw(enc, enc_params, &sample.x));
        for (p, t) in pred.iter().zip(&sample.y) {
            let diff = p - t;
            loss_sum += diff * diff * inv_dim;
        }
    }
    let loss = loss_sum / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("functional loss"));
    }
    Ok(loss)
}

/// Central-difference gradient of a scalar function, used as the independent
/// oracle for every analytic gradient in this crate.
pub fn finite_diff_gradient<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be > 0".into()));
    }
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work)?;
        work[i] = orig - h;
        let minus = f(&work)?;
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}
