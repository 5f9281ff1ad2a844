//! Parameter banks: the meta-network's training data.
//!
//! For each known task, `p` independent encoder-decoder models are trained
//! on subsets sampled with replacement from the task's data pool. The bank
//! of their flattened parameter vectors is what the meta-network later
//! consumes, the same way a data network consumes batches of samples.

use alloc::string::String;
use alloc::vec::Vec;

use crate::nn::{
    self, functional_loss, functional_loss_and_grad, LossKind, MlpSpec, OptimHyper,
    OptimizerState, ParamVector,
};
use crate::rng::{derive_seed, purpose, seed_for};
use crate::sample::Sample;
use crate::world::{make_dataset, TaskSpec, WorldConfig};
use crate::{Error, Result};

/// Abort training when the loss crosses this bound.
pub const DIVERGENCE_GUARD: f64 = 10.0;

/// The bank size and subset size used in the original large-scale setup
/// (5000 parameter samples per task, each trained on 1000 data points).
pub const PAPER_SCALE_BANK: (usize, usize) = (5000, 1000);

/// Desk-scale defaults: models per task and subset size.
pub const DESK_BANK: (usize, usize) = (32, 512);

/// Encoder-decoder architecture shared by every model of a world.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
}

impl ArchConfig {
    /// Default architecture for a patch side: `side^2 -> 48 -> 16` encoder
    /// and mirrored decoder, tanh hidden layers.
    pub fn default_for_side(side: usize) -> Result<Self> {
        let d = side * side;
        Ok(ArchConfig {
            encoder: MlpSpec::tanh_hidden(alloc::vec![d, 48, 16])?,
            decoder: MlpSpec::tanh_hidden(alloc::vec![16, 48, d])?,
        })
    }

    pub fn validate_for_world(&self, world: &WorldConfig) -> Result<()> {
        let d = world.patch_len();
        if self.encoder.input_dim() != d {
            return Err(Error::DimensionMismatch {
                context: "encoder input vs patch length",
                expected: d,
                found: self.encoder.input_dim(),
            });
        }
        if self.decoder.output_dim() != d {
            return Err(Error::DimensionMismatch {
                context: "decoder output vs patch length",
                expected: d,
                found: self.decoder.output_dim(),
            });
        }
        if self.encoder.output_dim() != self.decoder.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "encoder output vs decoder input",
                expected: self.decoder.input_dim(),
                found: self.encoder.output_dim(),
            });
        }
        Ok(())
    }

    pub fn encoder_params(&self) -> usize {
        self.encoder.param_count()
    }

    pub fn decoder_params(&self) -> usize {
        self.decoder.param_count()
    }

    pub fn combined_params(&self) -> usize {
        self.encoder_params() + self.decoder_params()
    }

    /// Fingerprint of the (encoder, decoder) pair; banks and combined
    /// parameter vectors carry it.
    pub fn fingerprint(&self) -> u64 {
        nn::pair_fingerprint(&self.encoder, &self.decoder)
    }

    /// Wraps a flat combined vector produced for this architecture.
    pub fn combined_vector(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::with_fingerprint(values, self.combined_params(), self.fingerprint())
    }
}

/// Base-learner training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Size of the per-task data pool that subsets are drawn from.
    pub pool_size: usize,
}

impl Default for BaseHyper {
    fn default() -> Self {
        BaseHyper {
            lr: 0.001,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            pool_size: 2048,
        }
    }
}

impl BaseHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.pool_size == 0 {
            return Err(Error::InvalidConfig(
                "base hyperparameters must be positive".into(),
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

/// One trained encoder-decoder model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub theta_e: ParamVector,
    pub theta_d: ParamVector,
    pub task_id: String,
    pub train_seed: u64,
    pub final_loss: f64,
}

impl ModelParams {
    /// Concatenated (encoder, decoder) vector in canonical order.
    pub fn combined(&self, arch: &ArchConfig) -> Result<ParamVector> {
        let mut values = Vec::with_capacity(arch.combined_params());
        values.extend_from_slice(self.theta_e.values());
        values.extend_from_slice(self.theta_d.values());
        arch.combined_vector(values)
    }

    /// Splits a combined vector back into a model.
    pub fn from_combined(
        arch: &ArchConfig,
        combined: &ParamVector,
        task_id: &str,
        train_seed: u64,
        final_loss: f64,
    ) -> Result<Self> {
        if combined.len() != arch.combined_params() {
            return Err(Error::DimensionMismatch {
                context: "combined vector",
                expected: arch.combined_params(),
                found: combined.len(),
            });
        }
        let (e, d) = combined.values().split_at(arch.encoder_params());
        Ok(ModelParams {
            theta_e: ParamVector::for_spec(&arch.encoder, e.to_vec())?,
            theta_d: ParamVector::for_spec(&arch.decoder, d.to_vec())?,
            task_id: task_id.into(),
            train_seed,
            final_loss,
        })
    }
}

/// `p` independently trained models of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBank {
    pub task_id: String,
    pub arch_fingerprint: u64,
    pub models: Vec<ModelParams>,
}

impl ParameterBank {
    pub fn size(&self) -> usize {
        self.models.len()
    }
}

/// Draws `l` samples uniformly with replacement.
pub fn sample_subset(dataset: &[Sample], l: usize, seed: u64) -> Result<Vec<Sample>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if l == 0 {
        return Err(Error::Empty("subset size"));
    }
    let mut rng = crate::rng::Stream::new(seed);
    Ok((0..l)
        .map(|_| dataset[rng.below(dataset.len())].clone())
        .collect())
}

/// Trains one encoder-decoder model of a task on a subset of its pool.
///
/// Seed layout (derived from `seed`): 1 subset sampling, 2 encoder init,
/// 3 decoder init. The task's data pool depends only on the world seed so
/// every model of a task samples from the same pool.
pub fn train_task_model(
    world: &WorldConfig,
    task: &TaskSpec,
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
    let task_idx = world.task_index(&task.task_id)? as u32;
    let pool_seed = seed_for(world.master_seed, purpose::BANK_POOL, task_idx, 0);
    let pool = make_dataset(world, task, hyper.pool_size, pool_seed)?;
    let subset = sample_subset(&pool, l, derive_seed(seed, 1))?;

    let mut values = nn::init(&arch.encoder, derive_seed(seed, 2)).into_values();
    values.extend(nn::init(&arch.decoder, derive_seed(seed, 3)).into_values());
    let mut combined = arch.combined_vector(values)?;

    let mut opt = OptimizerState::new(hyper.optimizer(), arch.combined_params());
    let mut last_epoch_loss = 0.0;
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for batch in subset.chunks(hyper.batch_size) {
            let (loss, grad) = functional_loss_and_grad(
                &arch.encoder,
                &arch.decoder,
                &combined,
                batch,
                LossKind::Mse,
            )?;
            if !loss.is_finite() || loss > DIVERGENCE_GUARD {
                return Err(Error::Diverged {
                    context: "base learner",
                    loss,
                });
            }
            epoch_loss += loss * batch.len() as f64;
            let mut v = combined.into_values();
            opt.step_in_place(&mut v, grad.values())?;
            combined = arch.combined_vector(v)?;
        }
        if epoch == epochs - 1 {
            last_epoch_loss = epoch_loss / subset.len() as f64;
        }
    }

    // Held-out probe guards against silent divergence.
    let probe_seed = seed_for(world.master_seed, purpose::BANK_PROBE, task_idx, 0);
    let probe = make_dataset(world, task, 64, probe_seed)?;
    let probe_loss =
        functional_loss(&arch.encoder, &arch.decoder, &combined, &probe, LossKind::Mse)?;
    if !probe_loss.is_finite() || probe_loss >= DIVERGENCE_GUARD {
        return Err(Error::Diverged {
            context: "base learner held-out probe",
            loss: probe_loss,
        });
    }

    ModelParams::from_combined(arch, &combined, &task.task_id, seed, last_epoch_loss)
}

/// Builds the full bank of `p` models for one task. Per-model seeds come
/// from the documented (task, model) stream enumeration, so banks are
/// bit-identical across runs and assembly orders.
pub fn build_bank(
    world: &WorldConfig,
    task: &TaskSpec,
    arch: &ArchConfig,
    p: usize,
    l: usize,
    epochs: usize,
    hyper: &BaseHyper,
    master_seed: u64,
) -> Result<ParameterBank> {
    if p == 0 {
        return Err(Error::Empty("bank size"));
    }
    let task_idx = world.task_index(&task.task_id)? as u32;
    let mut models = Vec::with_capacity(p);
    for i in 0..p {
        let seed = seed_for(master_seed, purpose::BANK_MODEL, task_idx, i as u32);
        models.push(train_task_model(world, task, arch, l, epochs, hyper, seed)?);
    }
    Ok(ParameterBank {
        task_id: task.task_id.clone(),
        arch_fingerprint: arch.fingerprint(),
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn quick_hyper() -> BaseHyper {
        BaseHyper {
            pool_size: 128,
            ..BaseHyper::default()
        }
    }

    #[test]
    fn subset_from_singleton_repeats_it() {
        let s = Sample {
            x: vec![0.5],
            y: vec![0.25],
        };
        let subset = sample_subset(&[s.clone()], 3, 9).unwrap();
        assert_eq!(subset, vec![s.clone(), s.clone(), s]);
    }

    #[test]
    fn subset_length_is_exact_and_empty_dataset_rejected() {
        let data: Vec<Sample> = (0..4)
            .map(|i| Sample {
                x: vec![i as f64],
                y: vec![i as f64],
            })
            .collect();
        assert_eq!(sample_subset(&data, 7, 1).unwrap().len(), 7);
        assert!(sample_subset(&[], 3, 1).is_err());
    }

    #[test]
    fn subset_frequencies_are_uniform() {
        // Frequency oracle: 10000 draws from 10 elements.
        let data: Vec<Sample> = (0..10)
            .map(|i| Sample {
                x: vec![i as f64],
                y: vec![0.0],
            })
            .collect();
        let subset = sample_subset(&data, 10_000, 4).unwrap();
        let mut counts = [0usize; 10];
        for s in &subset {
            counts[s.x[0] as usize] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / 10_000.0;
            assert!((0.08..=0.12).contains(&freq), "element {i} frequency {freq}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let world = WorldConfig::default_world(1);
        let task = world.task("scale").unwrap();
        let arch = ArchConfig::default_for_side(world.patch_side).unwrap();
        let h = quick_hyper();
        let a = train_task_model(&world, task, &arch, 32, 2, &h, 77).unwrap();
        let b = train_task_model(&world, task, &arch, 32, 2, &h, 77).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train_seed, 77);
    }

    #[test]
    fn autoencoder_training_reduces_loss() {
        let world = WorldConfig::default_world(1);
        let task = world.task("autoencode").unwrap();
        let arch = ArchConfig::default_for_side(world.patch_side).unwrap();
        let h = BaseHyper::default();
        let seed = seed_for(1, purpose::BANK_MODEL, 0, 0);

        // Loss of the freshly initialized model on the same subset.
        let pool_seed = seed_for(world.master_seed, purpose::BANK_POOL, 0, 0);
        let pool = make_dataset(&world, task, h.pool_size, pool_seed).unwrap();
        let subset = sample_subset(&pool, 512, derive_seed(seed, 1)).unwrap();
        let mut init_values = nn::init(&arch.encoder, derive_seed(seed, 2)).into_values();
        init_values.extend(nn::init(&arch.decoder, derive_seed(seed, 3)).into_values());
        let init_combined = arch.combined_vector(init_values).unwrap();
        let initial = functional_loss(
            &arch.encoder,
            &arch.decoder,
            &init_combined,
            &subset,
            LossKind::Mse,
        )
        .unwrap();

        let model = train_task_model(&world, task, &arch, 512, 50, &h, seed).unwrap();
        assert!(
            model.final_loss < initial,
            "final {} vs initial {initial}",
            model.final_loss
        );

        // Reference-run threshold: held-out MSE on 256 fresh samples.
        let held_out =
            make_dataset(&world, task, 256, derive_seed(world.master_seed, 0xE)).unwrap();
        let mse = functional_loss(
            &arch.encoder,
            &arch.decoder,
            &model.combined(&arch).unwrap(),
            &held_out,
            LossKind::Mse,
        )
        .unwrap();
        assert!(mse < 0.02, "held-out mse {mse}");
    }

    #[test]
    fn banks_have_distinct_models_and_are_deterministic() {
        let world = WorldConfig::default_world(1);
        // zero-shot tasks can still be bank-trained by diagnostics
        let task = world.task("invert").unwrap();
        let arch = ArchConfig::default_for_side(world.patch_side).unwrap();
        let h = quick_hyper();
        let bank = build_bank(&world, task, &arch, 4, 16, 1, &h, 5).unwrap();
        assert_eq!(bank.size(), 4);
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_ne!(
                    bank.models[i].theta_e.values(),
                    bank.models[j].theta_e.values(),
                    "models {i} and {j} coincide"
                );
                assert_ne!(bank.models[i].train_seed, bank.models[j].train_seed);
            }
        }
        let again = build_bank(&world, task, &arch, 4, 16, 1, &h, 5).unwrap();
        assert_eq!(bank, again);
    }

    #[test]
    fn runaway_learning_rate_is_reported_as_divergence() {
        let world = WorldConfig::default_world(1);
        let task = world.task("edge").unwrap();
        let arch = ArchConfig::default_for_side(world.patch_side).unwrap();
        let h = BaseHyper {
            lr: 1e9,
            pool_size: 64,
            ..BaseHyper::default()
        };
        let err = train_task_model(&world, task, &arch, 32, 5, &h, 3).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "got {err:?}");
    }

    #[test]
    fn paper_scale_constants_match_reported_setup() {
        assert_eq!(PAPER_SCALE_BANK, (5000, 1000));
        assert_eq!(DESK_BANK, (32, 512));
    }
}
