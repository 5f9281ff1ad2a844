//! The parameter-regression meta-network.
//!
//! A network of `m` per-task branches plus a common trunk maps the encoder
//! parameters of the known tasks, each paired with its correlation to a
//! target task, to the full (encoder, decoder) parameter vector of that
//! target. Training alternates two regimes per known task: a *self* step
//! updates only the target's own branch plus the trunk, a *transfer* step
//! masks the target's branch (zero input, frozen weights) and updates
//! everything else plus the trunk. Transfer mode is also the inference
//! regime: a zero-shot task has no branch of its own, so its parameters are
//! regressed purely from the other tasks' branches and correlations.
//!
//! The trunk's first layer combines per-branch partial sums with a
//! correctly rounded summation, which makes the forward pass bitwise
//! invariant under a consistent permutation of branches, branch weights,
//! and trunk input blocks.

use alloc::vec;
use alloc::vec::Vec;

use crate::bank::{ArchConfig, BaseHyper, ModelParams, ParameterBank, DIVERGENCE_GUARD};
use crate::consensus::Gamma;
use crate::math;
use crate::nn::{
    self, functional_loss, functional_loss_and_grad, LayerShape, LossKind, MlpSpec, OptimHyper,
    OptimizerState, ParamVector,
};
use crate::rng::{derive_seed, purpose, seed_for, Stream};
use crate::sample::Sample;
use crate::world::{make_dataset, WorldConfig};
use crate::{Error, Result};

/// Architecture of the meta-network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaSpec {
    /// Number of branches (known tasks).
    pub m: usize,
    /// Per-branch network: input `P_E + 1`, output the embedding dimension.
    pub branch: MlpSpec,
    /// Common trunk: input `m * embed`, output `P_E + P_D`.
    pub common: MlpSpec,
    /// The data network whose parameters are regressed.
    pub arch: ArchConfig,
}

impl MetaSpec {
    /// Default meta architecture: branch hidden [128] with a 64-dim
    /// embedding, trunk hidden [256].
    pub fn for_arch(arch: ArchConfig, m: usize) -> Result<Self> {
        Self::with_dims(arch, m, &[128], 64, &[256])
    }

    pub fn with_dims(
        arch: ArchConfig,
        m: usize,
        branch_hidden: &[usize],
        embed_dim: usize,
        common_hidden: &[usize],
    ) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidConfig("meta-network needs m >= 2".into()));
        }
        let p_e = arch.encoder_params();
        let p_d = arch.decoder_params();
        let mut branch_dims = vec![p_e + 1];
        branch_dims.extend_from_slice(branch_hidden);
        branch_dims.push(embed_dim);
        let mut common_dims = vec![m * embed_dim];
        common_dims.extend_from_slice(common_hidden);
        common_dims.push(p_e + p_d);
        let spec = MetaSpec {
            m,
            branch: MlpSpec::tanh_hidden(branch_dims)?,
            common: MlpSpec::tanh_hidden(common_dims)?,
            arch,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidConfig("meta-network needs m >= 2".into()));
        }
        if self.branch.input_dim() != self.arch.encoder_params() + 1 {
            return Err(Error::DimensionMismatch {
                context: "branch input vs encoder params + 1",
                expected: self.arch.encoder_params() + 1,
                found: self.branch.input_dim(),
            });
        }
        if self.common.input_dim() != self.m * self.embed_dim() {
            return Err(Error::DimensionMismatch {
                context: "trunk input vs m * embed",
                expected: self.m * self.embed_dim(),
                found: self.common.input_dim(),
            });
        }
        if self.common.output_dim() != self.arch.combined_params() {
            return Err(Error::DimensionMismatch {
                context: "trunk output vs encoder + decoder params",
                expected: self.arch.combined_params(),
                found: self.common.output_dim(),
            });
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.branch.output_dim()
    }

    /// Total number of meta parameters (all branches plus the trunk).
    pub fn param_count(&self) -> usize {
        self.m * self.branch.param_count() + self.common.param_count()
    }
}

/// Weights of the meta-network: one vector per branch plus the trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    pub branches: Vec<ParamVector>,
    pub common: ParamVector,
}

impl MetaParams {
    /// Deterministic initialization; branch k derives its seed from
    /// (seed, k), the trunk from (seed, m).
    pub fn init(spec: &MetaSpec, seed: u64) -> Self {
        let branches = (0..spec.m)
            .map(|k| nn::init(&spec.branch, derive_seed(seed, k as u64)))
            .collect();
        let common = nn::init(&spec.common, derive_seed(seed, spec.m as u64));
        MetaParams { branches, common }
    }

    pub fn validate(&self, spec: &MetaSpec) -> Result<()> {
        if self.branches.len() != spec.m {
            return Err(Error::DimensionMismatch {
                context: "branch count",
                expected: spec.m,
                found: self.branches.len(),
            });
        }
        for b in &self.branches {
            if b.len() != spec.branch.param_count() {
                return Err(Error::DimensionMismatch {
                    context: "branch parameters",
                    expected: spec.branch.param_count(),
                    found: b.len(),
                });
            }
        }
        if self.common.len() != spec.common.param_count() {
            return Err(Error::DimensionMismatch {
                context: "trunk parameters",
                expected: spec.common.param_count(),
                found: self.common.len(),
            });
        }
        Ok(())
    }

    /// Canonical flattening: branches in order, then the trunk.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.branches {
            out.extend_from_slice(b.values());
        }
        out.extend_from_slice(self.common.values());
        out
    }

    pub fn from_flat(spec: &MetaSpec, values: &[f64]) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                context: "flat meta parameters",
                expected: spec.param_count(),
                found: values.len(),
            });
        }
        let bp = spec.branch.param_count();
        let mut branches = Vec::with_capacity(spec.m);
        for k in 0..spec.m {
            branches.push(ParamVector::for_spec(
                &spec.branch,
                values[k * bp..(k + 1) * bp].to_vec(),
            )?);
        }
        let common = ParamVector::for_spec(&spec.common, values[spec.m * bp..].to_vec())?;
        Ok(MetaParams { branches, common })
    }
}

/// One branch input: a known task's encoder parameters and its normalized
/// correlation with the target task.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionEntry {
    pub encoder: ParamVector,
    pub gamma: f64,
}

/// Ordered list of the m branch inputs for one regression.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionInput {
    pub entries: Vec<RegressionEntry>,
}

impl RegressionInput {
    pub fn validate(&self, spec: &MetaSpec) -> Result<()> {
        if self.entries.len() != spec.m {
            return Err(Error::DimensionMismatch {
                context: "regression input length",
                expected: spec.m,
                found: self.entries.len(),
            });
        }
        for e in &self.entries {
            if e.encoder.len() != spec.arch.encoder_params() {
                return Err(Error::DimensionMismatch {
                    context: "input encoder parameters",
                    expected: spec.arch.encoder_params(),
                    found: e.encoder.len(),
                });
            }
            if !(-1.0 / 3.0..=1.0).contains(&e.gamma) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "normalized correlation {} outside [-1/3, 1]",
                    e.gamma
                )));
            }
        }
        Ok(())
    }

    /// Copy with entry `k` replaced by a zero encoder and zero correlation
    /// (the transfer-mode masking of the target's own branch).
    pub fn with_masked_entry(&self, spec: &MetaSpec, k: usize) -> Self {
        let mut masked = self.clone();
        masked.entries[k] = RegressionEntry {
            encoder: ParamVector::for_spec(
                &spec.arch.encoder,
                vec![0.0; spec.arch.encoder_params()],
            )
            .expect("zero vector is valid"),
            gamma: 0.0,
        };
        masked
    }
}

/// Builds the regression input for a target task from the banks and an
/// aggregated correlation matrix. `gamma` is indexed by world task order;
/// entry k carries the correlation between known task k and the target.
pub fn build_regression_input(
    banks: &[ParameterBank],
    gamma: &Gamma,
    world: &WorldConfig,
    target_index: usize,
    bank_index: usize,
) -> Result<RegressionInput> {
    let known = world.known_tasks();
    if banks.len() != known.len() {
        return Err(Error::DimensionMismatch {
            context: "bank count vs known tasks",
            expected: known.len(),
            found: banks.len(),
        });
    }
    if gamma.k() != world.k() {
        return Err(Error::DimensionMismatch {
            context: "gamma size vs world",
            expected: world.k(),
            found: gamma.k(),
        });
    }
    let mut entries = Vec::with_capacity(banks.len());
    for (bank, (global_k, task)) in banks.iter().zip(&known) {
        if bank.task_id != task.task_id {
            return Err(Error::BadTask(alloc::format!(
                "bank order mismatch: expected {}, found {}",
                task.task_id,
                bank.task_id
            )));
        }
        let model = bank.models.get(bank_index).ok_or(Error::DimensionMismatch {
            context: "bank model index",
            expected: bank.models.len(),
            found: bank_index,
        })?;
        entries.push(RegressionEntry {
            encoder: model.theta_e.clone(),
            gamma: gamma.normalized_at(*global_k, target_index),
        });
    }
    Ok(RegressionInput { entries })
}

/// Meta-training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Weight of the data-consistency term.
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Samples drawn per step for the consistency term.
    pub consistency_batch: usize,
    pub schedule: Schedule,
}

/// Interleaving of self and transfer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Per epoch: iterate bank index and known task round-robin; one self
    /// step then one transfer step per pair.
    RoundRobin,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            lr: 0.0001,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 40,
            consistency_batch: 16,
            schedule: Schedule::RoundRobin,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "meta training hyperparameters must be positive".into(),
            ));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimHyper {
        OptimHyper {
            kind: nn::OptimKind::Adam,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Training regime of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// Update the target task's branch and the trunk only.
    SelfMode,
    /// Mask the target's branch input, freeze its weights, update all other
    /// branches and the trunk.
    Transfer,
}

/// Loss decomposition of one evaluation of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// Squared L2 distance between regressed and target parameters.
    pub param_term: f64,
    /// Loss of the regressed parameters on the task's own data.
    pub data_term: f64,
}

/// Optimizer states for the meta-network, one per component so masked
/// components stay bitwise untouched.
#[derive(Debug, Clone)]
pub struct MetaOptStates {
    pub branches: Vec<OptimizerState>,
    pub common: OptimizerState,
}

impl MetaOptStates {
    pub fn new(spec: &MetaSpec, config: &TrainConfig) -> Self {
        MetaOptStates {
            branches: (0..spec.m)
                .map(|_| OptimizerState::new(config.optimizer(), spec.branch.param_count()))
                .collect(),
            common: OptimizerState::new(config.optimizer(), spec.common.param_count()),
        }
    }
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub bank_index: usize,
    /// Position of the target among the known tasks (0..m).
    pub task_pos: usize,
    pub mode: StepMode,
    pub loss: LossParts,
    /// Squared norm of the step's target vector, for scale-free reporting.
    pub target_sq_norm: f64,
}

struct ForwardTrace {
    branch_acts: Vec<Vec<Vec<f64>>>,
    embeddings: Vec<Vec<f64>>,
    trunk_acts: Vec<Vec<f64>>,
}

impl ForwardTrace {
    fn output(&self) -> &[f64] {
        self.trunk_acts.last().unwrap()
    }
}

fn forward_trace(spec: &MetaSpec, params: &MetaParams, input: &RegressionInput) -> ForwardTrace {
    let mut branch_acts = Vec::with_capacity(spec.m);
    let mut embeddings = Vec::with_capacity(spec.m);
    for (k, entry) in input.entries.iter().enumerate() {
        let mut x = Vec::with_capacity(spec.branch.input_dim());
        x.extend_from_slice(entry.encoder.values());
        x.push(entry.gamma);
        let acts = nn::forward_cached(&spec.branch, params.branches[k].values(), &x);
        embeddings.push(acts.last().unwrap().clone());
        branch_acts.push(acts);
    }
    let trunk_acts = trunk_forward(&spec.common, params.common.values(), &embeddings);
    ForwardTrace {
        branch_acts,
        embeddings,
        trunk_acts,
    }
}

/// Trunk forward pass. The first layer accumulates one partial dot product
/// per branch block and combines them (plus the bias) with a correctly
/// rounded sum, so the result does not depend on branch order.
fn trunk_forward(common: &MlpSpec, params: &[f64], embeddings: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let layers = common.layers();
    let l0 = &layers[0];
    let embed = embeddings[0].len();
    debug_assert_eq!(l0.in_dim, embeddings.len() * embed);
    let w = &params[l0.weights.clone()];
    let b = &params[l0.biases.clone()];
    let mut terms = Vec::with_capacity(embeddings.len() + 1);
    let mut first = Vec::with_capacity(l0.out_dim);
    for o in 0..l0.out_dim {
        let row = &w[o * l0.in_dim..(o + 1) * l0.in_dim];
        terms.clear();
        terms.push(b[o]);
        for (k, emb) in embeddings.iter().enumerate() {
            terms.push(math::dot(&row[k * embed..(k + 1) * embed], emb));
        }
        first.push(l0.activation.apply(math::exact_sum(&terms)));
    }
    let mut acts = vec![first];
    for layer in &layers[1..] {
        let w = &params[layer.weights.clone()];
        let b = &params[layer.biases.clone()];
        let prev = acts.last().unwrap();
        let mut next = Vec::with_capacity(layer.out_dim);
        for o in 0..layer.out_dim {
            let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
            next.push(layer.activation.apply(b[o] + math::dot(row, prev)));
        }
        acts.push(next);
    }
    acts
}

/// Trunk backward pass: gradient for the trunk parameters plus one gradient
/// vector per branch embedding.
fn trunk_backward(
    common: &MlpSpec,
    params: &[f64],
    embeddings: &[Vec<f64>],
    trunk_acts: &[Vec<f64>],
    upstream: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let layers = common.layers();
    let mut grad = vec![0.0; common.param_count()];
    let mut delta = upstream.to_vec();
    for li in (1..layers.len()).rev() {
        let layer: &LayerShape = &layers[li];
        for (d, &a) in delta.iter_mut().zip(&trunk_acts[li]) {
            *d *= layer.activation.grad_from_output(a);
        }
        let input_act = &trunk_acts[li - 1];
        let w = &params[layer.weights.clone()];
        let wg = &mut grad[layer.weights.clone()];
        let mut prev = vec![0.0; layer.in_dim];
        for o in 0..layer.out_dim {
            let dz = delta[o];
            let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
            let grow = &mut wg[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (g, &x) in grow.iter_mut().zip(input_act) {
                *g += dz * x;
            }
            for (p, &wv) in prev.iter_mut().zip(row) {
                *p += dz * wv;
            }
        }
        for (g, &dz) in grad[layer.biases.clone()].iter_mut().zip(&delta) {
            *g += dz;
        }
        delta = prev;
    }
    let l0 = &layers[0];
    for (d, &a) in delta.iter_mut().zip(&trunk_acts[0]) {
        *d *= l0.activation.grad_from_output(a);
    }
    let embed = embeddings[0].len();
    let w = &params[l0.weights.clone()];
    let wg = &mut grad[l0.weights.clone()];
    let mut emb_grads = vec![vec![0.0; embed]; embeddings.len()];
    for o in 0..l0.out_dim {
        let dz = delta[o];
        let row = &w[o * l0.in_dim..(o + 1) * l0.in_dim];
        let grow = &mut wg[o * l0.in_dim..(o + 1) * l0.in_dim];
        for (k, emb) in embeddings.iter().enumerate() {
            let block = k * embed..(k + 1) * embed;
            for (g, &e) in grow[block.clone()].iter_mut().zip(emb) {
                *g += dz * e;
            }
            for (p, &wv) in emb_grads[k].iter_mut().zip(&row[block]) {
                *p += dz * wv;
            }
        }
    }
    for (g, &dz) in grad[l0.biases.clone()].iter_mut().zip(&delta) {
        *g += dz;
    }
    (grad, emb_grads)
}

/// Forward pass of the meta-network: regressed (encoder, decoder) vectors.
pub fn meta_forward(
    spec: &MetaSpec,
    params: &MetaParams,
    input: &RegressionInput,
) -> Result<(ParamVector, ParamVector)> {
    params.validate(spec)?;
    input.validate(spec)?;
    let trace = forward_trace(spec, params, input);
    let out = trace.output();
    let (e, d) = out.split_at(spec.arch.encoder_params());
    Ok((
        ParamVector::for_spec(&spec.arch.encoder, e.to_vec())?,
        ParamVector::for_spec(&spec.arch.decoder, d.to_vec())?,
    ))
}

/// The training objective of one (input, target) pair:
/// `||F(input) - target||^2 + lambda * L_data(F(input))`.
pub fn meta_loss(
    spec: &MetaSpec,
    params: &MetaParams,
    input: &RegressionInput,
    target: &ModelParams,
    consistency_batch: &[Sample],
    lambda: f64,
) -> Result<LossParts> {
    params.validate(spec)?;
    input.validate(spec)?;
    let trace = forward_trace(spec, params, input);
    let out = trace.output();
    let target_vec = target.combined(&spec.arch)?;
    let param_term = sq_distance(out, target_vec.values());
    let data_term = if consistency_batch.is_empty() {
        if lambda > 0.0 {
            return Err(Error::Empty("consistency batch"));
        }
        0.0
    } else {
        let out_pv = spec.arch.combined_vector(out.to_vec())?;
        functional_loss(
            &spec.arch.encoder,
            &spec.arch.decoder,
            &out_pv,
            consistency_batch,
            LossKind::Mse,
        )?
    };
    Ok(LossParts {
        total: param_term + lambda * data_term,
        param_term,
        data_term,
    })
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Gradients of the training objective for the unmasked components.
/// `branches[k]` is `None` for components excluded by the mode mask.
pub struct MetaGrads {
    pub branches: Vec<Option<Vec<f64>>>,
    pub common: Vec<f64>,
}

/// Loss and gradient in one pass. `active_branch` selects which branch
/// gradients are computed; the trunk gradient is always computed.
fn meta_loss_and_grad(
    spec: &MetaSpec,
    params: &MetaParams,
    input: &RegressionInput,
    target_vec: &[f64],
    consistency_batch: &[Sample],
    lambda: f64,
    active_branch: impl Fn(usize) -> bool,
) -> Result<(LossParts, MetaGrads)> {
    let trace = forward_trace(spec, params, input);
    let out = trace.output();
    let param_term = sq_distance(out, target_vec);

    let mut upstream: Vec<f64> = out
        .iter()
        .zip(target_vec)
        .map(|(o, t)| 2.0 * (o - t))
        .collect();
    let data_term = if consistency_batch.is_empty() {
        if lambda > 0.0 {
            return Err(Error::Empty("consistency batch"));
        }
        0.0
    } else {
        let out_pv = spec.arch.combined_vector(out.to_vec())?;
        let (loss, data_grad) = functional_loss_and_grad(
            &spec.arch.encoder,
            &spec.arch.decoder,
            &out_pv,
            consistency_batch,
            LossKind::Mse,
        )?;
        if lambda != 0.0 {
            for (u, g) in upstream.iter_mut().zip(data_grad.values()) {
                *u += lambda * g;
            }
        }
        loss
    };

    let (common_grad, emb_grads) = trunk_backward(
        &spec.common,
        params.common.values(),
        &trace.embeddings,
        &trace.trunk_acts,
        &upstream,
    );
    let mut branch_grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(spec.m);
    for k in 0..spec.m {
        if active_branch(k) {
            let mut grad = vec![0.0; spec.branch.param_count()];
            nn::backward_raw(
                &spec.branch,
                params.branches[k].values(),
                &trace.branch_acts[k],
                &emb_grads[k],
                &mut grad,
            );
            branch_grads.push(Some(grad));
        } else {
            branch_grads.push(None);
        }
    }
    let total = param_term + lambda * data_term;
    if !total.is_finite() {
        return Err(Error::NonFinite("meta loss"));
    }
    Ok((
        LossParts {
            total,
            param_term,
            data_term,
        },
        MetaGrads {
            branches: branch_grads,
            common: common_grad,
        },
    ))
}

/// Combined loss/gradient pass with every branch active, flattened in the
/// canonical MetaParams order; the gradient-check suites drive it directly.
pub fn meta_loss_and_full_grad(
    spec: &MetaSpec,
    params: &MetaParams,
    input: &RegressionInput,
    target: &ModelParams,
    consistency_batch: &[Sample],
    lambda: f64,
) -> Result<(LossParts, Vec<f64>)> {
    params.validate(spec)?;
    input.validate(spec)?;
    let target_vec = target.combined(&spec.arch)?;
    let (loss, grads) = meta_loss_and_grad(
        spec,
        params,
        input,
        target_vec.values(),
        consistency_batch,
        lambda,
        |_| true,
    )?;
    let mut flat = Vec::with_capacity(spec.param_count());
    for g in &grads.branches {
        flat.extend_from_slice(g.as_ref().expect("all branches active"));
    }
    flat.extend_from_slice(&grads.common);
    Ok((loss, flat))
}

/// Outcome of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: LossParts,
    pub target_sq_norm: f64,
}

/// One optimizer step in the given mode.
///
/// Self mode updates branch `task_pos` and the trunk; every other branch
/// (parameters and optimizer state) stays bitwise untouched. Transfer mode
/// replaces branch `task_pos`'s input with zeros (correlation included),
/// freezes that branch, and updates all others plus the trunk. The
/// consistency batch is resampled from the target task's data using
/// `step_seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    spec: &MetaSpec,
    params: &mut MetaParams,
    opt: &mut MetaOptStates,
    mode: StepMode,
    task_pos: usize,
    input: &RegressionInput,
    target: &ModelParams,
    world: &WorldConfig,
    config: &TrainConfig,
    step_seed: u64,
) -> Result<StepOutcome> {
    config.validate()?;
    params.validate(spec)?;
    input.validate(spec)?;
    if task_pos >= spec.m {
        return Err(Error::DimensionMismatch {
            context: "target task position",
            expected: spec.m,
            found: task_pos,
        });
    }
    let task = world.task(&target.task_id)?;
    let batch = if config.consistency_batch > 0 {
        make_dataset(world, task, config.consistency_batch, step_seed)?
    } else {
        Vec::new()
    };
    let target_vec = target.combined(&spec.arch)?;

    let masked;
    let effective_input = match mode {
        StepMode::SelfMode => input,
        StepMode::Transfer => {
            masked = input.with_masked_entry(spec, task_pos);
            &masked
        }
    };
    let active = |k: usize| match mode {
        StepMode::SelfMode => k == task_pos,
        StepMode::Transfer => k != task_pos,
    };
    let (loss, grads) = meta_loss_and_grad(
        spec,
        params,
        effective_input,
        target_vec.values(),
        &batch,
        config.lambda,
        active,
    )?;

    for (k, grad) in grads.branches.iter().enumerate() {
        if let Some(g) = grad {
            let mut v = core::mem::replace(
                &mut params.branches[k],
                ParamVector::for_spec(&spec.branch, vec![0.0; spec.branch.param_count()])?,
            )
            .into_values();
            opt.branches[k].step_in_place(&mut v, g)?;
            params.branches[k] = ParamVector::for_spec(&spec.branch, v)?;
        }
    }
    let mut v = core::mem::replace(
        &mut params.common,
        ParamVector::for_spec(&spec.common, vec![0.0; spec.common.param_count()])?,
    )
    .into_values();
    opt.common.step_in_place(&mut v, &grads.common)?;
    params.common = ParamVector::for_spec(&spec.common, v)?;

    Ok(StepOutcome {
        loss,
        target_sq_norm: math::norm_sq(target_vec.values()),
    })
}

/// Trains the meta-network over the banks.
///
/// Round-robin schedule: per epoch, iterate bank index 0..p and known task
/// 0..m; for each pair run one self step then one transfer step, each with
/// a freshly derived consistency-batch seed. The loss history therefore has
/// `epochs * p * m * 2` records.
pub fn train_meta(
    banks: &[ParameterBank],
    gamma: &Gamma,
    world: &WorldConfig,
    spec: &MetaSpec,
    config: &TrainConfig,
    seed: u64,
) -> Result<(MetaParams, Vec<StepRecord>)> {
    config.validate()?;
    spec.validate()?;
    let known = world.known_tasks();
    if banks.len() != known.len() || banks.len() != spec.m {
        return Err(Error::DimensionMismatch {
            context: "bank count",
            expected: spec.m,
            found: banks.len(),
        });
    }
    let p = banks[0].size();
    for bank in banks {
        if bank.size() != p {
            return Err(Error::DimensionMismatch {
                context: "bank sizes",
                expected: p,
                found: bank.size(),
            });
        }
        if bank.arch_fingerprint != spec.arch.fingerprint() {
            return Err(Error::InvalidConfig(alloc::format!(
                "bank {} was built for a different architecture",
                bank.task_id
            )));
        }
    }

    let mut params = MetaParams::init(spec, seed_for(seed, purpose::META_INIT, 0, 0));
    let mut opt = MetaOptStates::new(spec, config);
    let mut history = Vec::with_capacity(config.epochs * p * spec.m * 2);
    let mut step_counter: u32 = 0;
    for epoch in 0..config.epochs {
        for bank_index in 0..p {
            for task_pos in 0..spec.m {
                let global_index = known[task_pos].0;
                let input = build_regression_input(banks, gamma, world, global_index, bank_index)?;
                let target = banks[task_pos].models[bank_index].clone();
                for mode in [StepMode::SelfMode, StepMode::Transfer] {
                    let step_seed = seed_for(seed, purpose::META_BATCH, 0, step_counter);
                    step_counter += 1;
                    let outcome = train_step(
                        spec,
                        &mut params,
                        &mut opt,
                        mode,
                        task_pos,
                        &input,
                        &target,
                        world,
                        config,
                        step_seed,
                    )?;
                    history.push(StepRecord {
                        epoch,
                        bank_index,
                        task_pos,
                        mode,
                        loss: outcome.loss,
                        target_sq_norm: outcome.target_sq_norm,
                    });
                }
            }
        }
    }
    Ok((params, history))
}

/// Regresses the parameters of a zero-shot task with a single transfer-mode
/// forward pass (no branch corresponds to the target, so nothing is
/// masked).
///
/// `bank_index` picks the model index supplying the input encoders
/// (default 0); with `average` set, the regressed outputs are averaged over
/// every bank index instead.
#[allow(clippy::too_many_arguments)]
pub fn regress_zero_shot(
    spec: &MetaSpec,
    trained: &MetaParams,
    banks: &[ParameterBank],
    gamma: &Gamma,
    world: &WorldConfig,
    zero_task_id: &str,
    bank_index: usize,
    average: bool,
) -> Result<ModelParams> {
    let j = world.task_index(zero_task_id)?;
    if !world.tasks[j].zero_shot {
        return Err(Error::BadTask(alloc::format!(
            "{zero_task_id} is a known task; regression only applies to zero-shot tasks"
        )));
    }
    let p = banks.first().map(|b| b.size()).unwrap_or(0);
    let indices: Vec<usize> = if average {
        (0..p).collect()
    } else {
        vec![bank_index]
    };
    if indices.is_empty() {
        return Err(Error::Empty("bank"));
    }
    let mut acc = vec![0.0; spec.arch.combined_params()];
    for &idx in &indices {
        let input = build_regression_input(banks, gamma, world, j, idx)?;
        let (e, d) = meta_forward(spec, trained, &input)?;
        for (a, v) in acc.iter_mut().zip(e.values().iter().chain(d.values())) {
            *a += v;
        }
    }
    let inv = 1.0 / indices.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    let combined = spec.arch.combined_vector(acc)?;
    ModelParams::from_combined(&spec.arch, &combined, zero_task_id, 0, 0.0)
}

/// Finetunes a fresh decoder on a target task with the encoder frozen.
///
/// The decoder trains on (encoder output, target) pairs from the target
/// task's data pool; the returned encoder is bitwise the input encoder.
/// Seed layout: 1 subset sampling, 2 decoder initialization.
#[allow(clippy::too_many_arguments)]
pub fn transfer_decoder(
    frozen_encoder: &ParamVector,
    target_task_id: &str,
    world: &WorldConfig,
    arch: &ArchConfig,
    l: usize,
    epochs: usize,
    hyper: &BaseHyper,
    seed: u64,
) -> Result<ModelParams> {
    arch.validate_for_world(world)?;
    hyper.validate()?;
    if epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be >= 1".into()));
    }
    if frozen_encoder.len() != arch.encoder_params() {
        return Err(Error::DimensionMismatch {
            context: "frozen encoder",
            expected: arch.encoder_params(),
            found: frozen_encoder.len(),
        });
    }
    let task = world.task(target_task_id)?;
    let task_idx = world.task_index(target_task_id)? as u32;
    let pool_seed = seed_for(world.master_seed, purpose::BANK_POOL, task_idx, 0);
    let pool = make_dataset(world, task, hyper.pool_size, pool_seed)?;
    let subset = crate::bank::sample_subset(&pool, l, derive_seed(seed, 1))?;

    // The encoder is frozen, so its outputs can be precomputed once and the
    // decoder trained as a plain regression network on (embedding, target).
    let embedded: Vec<Sample> = subset
        .iter()
        .map(|s| Sample {
            x: nn::forward_raw(&arch.encoder, frozen_encoder.values(), &s.x),
            y: s.y.clone(),
        })
        .collect();

    let mut decoder = nn::init(&arch.decoder, derive_seed(seed, 2));
    let mut opt = OptimizerState::new(
        OptimHyper {
            kind: nn::OptimKind::Adam,
            lr: hyper.lr,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            eps: hyper.eps,
        },
        arch.decoder_params(),
    );
    let out_dim = arch.decoder.output_dim();
    let inv_dim = 1.0 / out_dim as f64;
    let mut last_epoch_loss = 0.0;
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for batch in embedded.chunks(hyper.batch_size) {
            let mut grad = vec![0.0; arch.decoder_params()];
            let mut batch_loss = 0.0;
            for s in batch {
                let acts = nn::forward_cached(&arch.decoder, decoder.values(), &s.x);
                let pred = acts.last().unwrap();
                let mut upstream = Vec::with_capacity(out_dim);
                for (p, t) in pred.iter().zip(&s.y) {
                    let diff = p - t;
                    batch_loss += diff * diff * inv_dim;
                    upstream.push(2.0 * diff * inv_dim);
                }
                nn::backward_raw(&arch.decoder, decoder.values(), &acts, &upstream, &mut grad);
            }
            let inv_batch = 1.0 / batch.len() as f64;
            for g in &mut grad {
                *g *= inv_batch;
            }
            let loss = batch_loss * inv_batch;
            if !loss.is_finite() || loss > DIVERGENCE_GUARD {
                return Err(Error::Diverged {
                    context: "decoder finetuning",
                    loss,
                });
            }
            epoch_loss += loss * batch.len() as f64;
            let mut v = decoder.into_values();
            opt.step_in_place(&mut v, &grad)?;
            decoder = ParamVector::for_spec(&arch.decoder, v)?;
        }
        if epoch == epochs - 1 {
            last_epoch_loss = epoch_loss / embedded.len() as f64;
        }
    }
    Ok(ModelParams {
        theta_e: frozen_encoder.clone(),
        theta_d: decoder,
        task_id: target_task_id.into(),
        train_seed: seed,
        final_loss: last_epoch_loss,
    })
}

/// Builds a small meta setup for tests and gradient checks: a tiny world,
/// micro data networks, and banks of `p` randomly initialized models per
/// known task.
pub fn micro_fixture(p: usize, seed: u64) -> (WorldConfig, MetaSpec, Vec<ParameterBank>) {
    let mut world = WorldConfig::default_world(seed);
    world.patch_side = 2;
    let arch = ArchConfig {
        encoder: MlpSpec::tanh_hidden(vec![4, 2]).unwrap(),
        decoder: MlpSpec::tanh_hidden(vec![2, 4]).unwrap(),
    };
    let spec = MetaSpec::with_dims(arch.clone(), 6, &[6], 4, &[8]).unwrap();
    let mut rng = Stream::new(seed);
    let banks: Vec<ParameterBank> = world
        .known_tasks()
        .iter()
        .map(|(_, task)| ParameterBank {
            task_id: task.task_id.clone(),
            arch_fingerprint: arch.fingerprint(),
            models: (0..p)
                .map(|i| ModelParams {
                    theta_e: nn::init(&arch.encoder, rng.next_u64()),
                    theta_d: nn::init(&arch.decoder, rng.next_u64()),
                    task_id: task.task_id.clone(),
                    train_seed: i as u64,
                    final_loss: 0.0,
                })
                .collect(),
        })
        .collect();
    (world, spec, banks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::assemble_gamma;

    fn micro_gamma(world: &WorldConfig) -> Gamma {
        assemble_gamma(world.true_gamma().flattened(), world.k()).unwrap()
    }

    #[test]
    fn default_spec_dimensions() {
        let arch = ArchConfig::default_for_side(8).unwrap();
        let spec = MetaSpec::for_arch(arch.clone(), 6).unwrap();
        assert_eq!(spec.branch.input_dim(), arch.encoder_params() + 1);
        assert_eq!(spec.branch.output_dim(), 64);
        assert_eq!(spec.common.input_dim(), 6 * 64);
        assert_eq!(spec.common.output_dim(), arch.combined_params());
    }

    #[test]
    fn forward_output_shapes_and_zero_params() {
        let (world, spec, banks) = micro_fixture(2, 3);
        let gamma = micro_gamma(&world);
        let input = build_regression_input(&banks, &gamma, &world, 6, 0).unwrap();
        let params = MetaParams::init(&spec, 5);
        let (e, d) = meta_forward(&spec, &params, &input).unwrap();
        assert_eq!(e.len(), spec.arch.encoder_params());
        assert_eq!(d.len(), spec.arch.decoder_params());

        let zero = MetaParams::from_flat(&spec, &vec![0.0; spec.param_count()]).unwrap();
        let (e0, d0) = meta_forward(&spec, &zero, &input).unwrap();
        assert!(e0.values().iter().all(|&v| v == 0.0));
        assert!(d0.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_branch_permutation_equivariant() {
        let (world, spec, banks) = micro_fixture(2, 7);
        let gamma = micro_gamma(&world);
        let input = build_regression_input(&banks, &gamma, &world, 7, 1).unwrap();
        let params = MetaParams::init(&spec, 11);
        let base = meta_forward(&spec, &params, &input).unwrap();

        // swap branches 1 and 4 consistently: inputs, branch weights, and
        // the trunk's first-layer input blocks
        let (a, b) = (1usize, 4usize);
        let mut swapped_input = input.clone();
        swapped_input.entries.swap(a, b);
        let mut swapped = params.clone();
        swapped.branches.swap(a, b);
        let embed = spec.embed_dim();
        let l0 = &spec.common.layers()[0];
        let mut common = swapped.common.values().to_vec();
        for o in 0..l0.out_dim {
            let row = o * l0.in_dim;
            for i in 0..embed {
                common.swap(row + a * embed + i, row + b * embed + i);
            }
        }
        swapped.common = ParamVector::for_spec(&spec.common, common).unwrap();
        let perm = meta_forward(&spec, &swapped, &swapped_input).unwrap();
        assert_eq!(base.0.values(), perm.0.values());
        assert_eq!(base.1.values(), perm.1.values());
    }

    #[test]
    fn loss_is_affine_in_lambda() {
        let (world, spec, banks) = micro_fixture(2, 13);
        let gamma = micro_gamma(&world);
        let input = build_regression_input(&banks, &gamma, &world, 0, 0).unwrap();
        let params = MetaParams::init(&spec, 17);
        let target = &banks[0].models[0];
        let task = world.task("autoencode").unwrap();
        let batch = make_dataset(&world, task, 3, 99).unwrap();
        let parts: Vec<LossParts> = [0.0, 0.5, 2.0]
            .iter()
            .map(|&l| meta_loss(&spec, &params, &input, target, &batch, l).unwrap())
            .collect();
        assert_eq!(parts[0].total, parts[0].param_term);
        for p in &parts {
            assert_eq!(p.data_term, parts[0].data_term);
            assert_eq!(p.param_term, parts[0].param_term);
        }
        let slope1 = (parts[1].total - parts[0].total) / 0.5;
        let slope2 = (parts[2].total - parts[1].total) / 1.5;
        assert!((slope1 - parts[0].data_term).abs() < 1e-12);
        assert!((slope2 - parts[0].data_term).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_empty_batch_with_positive_lambda() {
        let (world, spec, banks) = micro_fixture(1, 19);
        let gamma = micro_gamma(&world);
        let input = build_regression_input(&banks, &gamma, &world, 0, 0).unwrap();
        let params = MetaParams::init(&spec, 21);
        let target = &banks[0].models[0];
        assert!(matches!(
            meta_loss(&spec, &params, &input, target, &[], 0.1),
            Err(Error::Empty(_))
        ));
        assert!(meta_loss(&spec, &params, &input, target, &[], 0.0).is_ok());
    }

    /// World-free micro setup small enough for exhaustive finite
    /// differences: 125 meta parameters over a 2-pixel data network.
    fn nano_fixture(seed: u64) -> (MetaSpec, RegressionInput, ModelParams, Vec<Sample>) {
        let arch = ArchConfig {
            encoder: MlpSpec::tanh_hidden(vec![2, 1]).unwrap(),
            decoder: MlpSpec::tanh_hidden(vec![1, 2]).unwrap(),
        };
        let spec = MetaSpec::with_dims(arch.clone(), 2, &[3], 2, &[6]).unwrap();
        let mut rng = Stream::new(seed);
        let entries = (0..2)
            .map(|_| RegressionEntry {
                encoder: nn::init(&arch.encoder, rng.next_u64()),
                gamma: rng.uniform(-1.0 / 3.0, 1.0),
            })
            .collect();
        let target = ModelParams {
            theta_e: nn::init(&arch.encoder, rng.next_u64()),
            theta_d: nn::init(&arch.decoder, rng.next_u64()),
            task_id: "nano".into(),
            train_seed: 0,
            final_loss: 0.0,
        };
        let batch = (0..2)
            .map(|_| Sample {
                x: vec![rng.next_f64(), rng.next_f64()],
                y: vec![rng.next_f64(), rng.next_f64()],
            })
            .collect();
        (spec, RegressionInput { entries }, target, batch)
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let (spec, input, target, batch) = nano_fixture(23);
        assert!(
            spec.param_count() <= 400,
            "micro spec grew: {}",
            spec.param_count()
        );
        let params = MetaParams::init(&spec, 29);
        let lambda = 0.3;
        let (_, analytic) =
            meta_loss_and_full_grad(&spec, &params, &input, &target, &batch, lambda).unwrap();
        let flat = params.flatten();
        let fd = nn::finite_diff_gradient(
            |v| {
                let p = MetaParams::from_flat(&spec, v)?;
                meta_loss(&spec, &p, &input, &target, &batch, lambda).map(|l| l.total)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let err = math::max_relative_error(&analytic, &fd);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn self_step_touches_only_target_branch_and_trunk() {
        let (world, spec, banks) = micro_fixture(2, 31);
        let gamma = micro_gamma(&world);
        let input = build_regression_input(&banks, &gamma, &world, 1, 0).unwrap();
        let mut params = MetaParams::init(&spec, 37);
        let config = TrainConfig {
            consistency_batch: 2,
            ..TrainConfig::default()
        };
        let mut opt = MetaOptStates::new(&spec, &config);
        let before = params.clone();
        train_step(
            &spec,
            &mut params,
            &mut opt,
            StepMode::SelfMode,
            1,
            &input,
            &banks[1].models[0].clone(),
            &world,
            &config,
            43,
        )
        .unwrap();
        for k in 0..spec.m {
            if k == 1 {
                assert_ne!(params.branches[k].values(), before.branches[k].values());
                assert_eq!(opt.branches[k].step, 1);
            } else {
                assert_eq!(params.branches[k].values(), before.branches[k].values());
                assert_eq!(opt.branches[k].step, 0);
            }
        }
        assert_ne!(params.common.values(), before.common.values());
        assert_eq!(opt.common.step, 1);
    }

    #[test]
    fn transfer_step_freezes_target_branch_and_ignores_its_input() {
        let (world, spec, banks) = micro_fixture(2, 41);
        let gamma = micro_gamma(&world);
        let input = build_regression_input(&banks, &gamma, &world, 3, 1).unwrap();
        let config = TrainConfig {
            consistency_batch: 2,
            ..TrainConfig::default()
        };
        let target = banks[3].models[1].clone();

        let run = |input: &RegressionInput| {
            let mut params = MetaParams::init(&spec, 47);
            let mut opt = MetaOptStates::new(&spec, &config);
            let out = train_step(
                &spec,
                &mut params,
                &mut opt,
                StepMode::Transfer,
                3,
                input,
                &target,
                &world,
                &config,
                53,
            )
            .unwrap();
            (params, opt, out)
        };

        let before = MetaParams::init(&spec, 47);
        let (params, opt, outcome) = run(&input);
        assert_eq!(params.branches[3].values(), before.branches[3].values());
        assert_eq!(opt.branches[3].step, 0);
        for k in [0usize, 1, 2, 4, 5] {
            assert_ne!(params.branches[k].values(), before.branches[k].values());
            assert_eq!(opt.branches[k].step, 1);
        }

        // garbling the masked branch's input changes nothing, bit for bit
        let mut garbled = input.clone();
        garbled.entries[3] = RegressionEntry {
            encoder: nn::init(&spec.arch.encoder, 999),
            gamma: 1.0,
        };
        let (params2, _, outcome2) = run(&garbled);
        assert_eq!(outcome.loss.total.to_bits(), outcome2.loss.total.to_bits());
        for k in 0..spec.m {
            assert_eq!(params.branches[k].values(), params2.branches[k].values());
        }
        assert_eq!(params.common.values(), params2.common.values());
    }

    #[test]
    fn train_meta_schedule_and_determinism() {
        let (world, spec, banks) = micro_fixture(2, 59);
        let gamma = micro_gamma(&world);
        let config = TrainConfig {
            epochs: 2,
            consistency_batch: 2,
            ..TrainConfig::default()
        };
        let (params, history) = train_meta(&banks, &gamma, &world, &spec, &config, 61).unwrap();
        assert_eq!(history.len(), 2 * 2 * 6 * 2);
        assert_eq!(history[0].mode, StepMode::SelfMode);
        assert_eq!(history[1].mode, StepMode::Transfer);
        let (params2, history2) = train_meta(&banks, &gamma, &world, &spec, &config, 61).unwrap();
        assert_eq!(params, params2);
        assert_eq!(history, history2);
    }

    #[test]
    fn regress_zero_shot_rejects_known_tasks_and_is_deterministic() {
        let (world, spec, banks) = micro_fixture(3, 67);
        let gamma = micro_gamma(&world);
        let params = MetaParams::init(&spec, 71);
        assert!(matches!(
            regress_zero_shot(&spec, &params, &banks, &gamma, &world, "blur", 0, false),
            Err(Error::BadTask(_))
        ));
        let a =
            regress_zero_shot(&spec, &params, &banks, &gamma, &world, "invert", 0, false).unwrap();
        let b =
            regress_zero_shot(&spec, &params, &banks, &gamma, &world, "invert", 0, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.task_id, "invert");
        assert_eq!(a.theta_e.len(), spec.arch.encoder_params());
        // averaging over the bank is a different estimate
        let avg =
            regress_zero_shot(&spec, &params, &banks, &gamma, &world, "invert", 0, true).unwrap();
        assert_ne!(avg.theta_e.values(), a.theta_e.values());
    }

    #[test]
    fn transfer_decoder_keeps_encoder_bits() {
        let world = WorldConfig::default_world(1);
        let arch = ArchConfig::default_for_side(world.patch_side).unwrap();
        let hyper = BaseHyper {
            pool_size: 64,
            ..BaseHyper::default()
        };
        let encoder = nn::init(&arch.encoder, 123);
        let a = transfer_decoder(&encoder, "edge", &world, &arch, 32, 2, &hyper, 7).unwrap();
        assert_eq!(a.theta_e.values(), encoder.values());
        assert_eq!(a.task_id, "edge");
        let b = transfer_decoder(&encoder, "edge", &world, &arch, 32, 2, &hyper, 7).unwrap();
        assert_eq!(a, b);
        let c = transfer_decoder(&encoder, "edge", &world, &arch, 32, 2, &hyper, 8).unwrap();
        assert_ne!(a.theta_d.values(), c.theta_d.values());
    }
}
