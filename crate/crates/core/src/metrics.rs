//! Evaluation metrics and comparison reports.
//!
//! Implements the depth-style error formulas (RMSE lin/log, absolute and
//! squared relative distance), per-sample angular errors with the
//! 11.25/22.5/30 degree thresholds, pairwise win rates, and a report
//! builder that compares regressed parameters against baselines and a
//! supervised oracle. Metric sums are accumulated with correctly rounded
//! summation, so every metric is bitwise invariant under permutations of
//! the test set.

use alloc::string::String;
use alloc::vec::Vec;

use crate::bank::{self, ArchConfig, BaseHyper, ModelParams, ParameterBank};
use crate::math;
use crate::nn;
use crate::rng::{derive_seed, purpose, seed_for};
use crate::sample::Sample;
use crate::world::{make_dataset, WorldConfig};
use crate::{Error, Result};

/// Floor for denominators and log arguments in the relative-error formulas.
const VALUE_FLOOR: f64 = 1e-6;
/// Norm floor below which a sample is skipped for angular error.
const NORM_FLOOR: f64 = 1e-9;

/// Which value divides the absolute difference in ARD/SRD. The printed
/// formulas divide by the estimated value; dividing by ground truth is the
/// more common convention and available behind this switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelativeDenominator {
    Estimated,
    GroundTruth,
}

/// All metrics of one model on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSet {
    /// Mean per-pixel squared error.
    pub mse: f64,
    /// `sqrt(sum (d - d*)^2) / N` over all pixels, as printed.
    pub rmse_lin: f64,
    /// Same with floored logs.
    pub rmse_log: f64,
    /// Mean absolute relative distance.
    pub ard: f64,
    /// Mean squared relative distance.
    pub srd: f64,
    pub angular_mean_deg: f64,
    pub angular_median_deg: f64,
    pub frac_within_11_25: f64,
    pub frac_within_22_5: f64,
    pub frac_within_30: f64,
    /// Samples skipped because a prediction or target norm was ~0.
    pub angular_skipped: usize,
}

impl MetricSet {
    /// Field names in the order used by flat exports.
    pub const FIELD_NAMES: [&'static str; 10] = [
        "mse",
        "rmse_lin",
        "rmse_log",
        "ard",
        "srd",
        "angular_mean_deg",
        "angular_median_deg",
        "frac_within_11_25",
        "frac_within_22_5",
        "frac_within_30",
    ];

    pub fn fields(&self) -> [f64; 10] {
        [
            self.mse,
            self.rmse_lin,
            self.rmse_log,
            self.ard,
            self.srd,
            self.angular_mean_deg,
            self.angular_median_deg,
            self.frac_within_11_25,
            self.frac_within_22_5,
            self.frac_within_30,
        ]
    }
}

fn predictions(
    arch: &ArchConfig,
    model: &ModelParams,
    dataset: &[Sample],
) -> Result<Vec<Vec<f64>>> {
    let combined = model.combined(arch)?;
    let (enc, dec) = combined.values().split_at(arch.encoder_params());
    dataset
        .iter()
        .map(|s| {
            if s.x.len() != arch.encoder.input_dim() || s.y.len() != arch.decoder.output_dim() {
                return Err(Error::DimensionMismatch {
                    context: "evaluation sample",
                    expected: arch.encoder.input_dim(),
                    found: s.x.len(),
                });
            }
            Ok(nn::forward_raw(
                &arch.decoder,
                dec,
                &nn::forward_raw(&arch.encoder, enc, &s.x),
            ))
        })
        .collect()
}

/// Per-sample mean squared error of a model on a dataset.
pub fn per_sample_mse(
    arch: &ArchConfig,
    model: &ModelParams,
    dataset: &[Sample],
) -> Result<Vec<f64>> {
    let preds = predictions(arch, model, dataset)?;
    Ok(preds
        .iter()
        .zip(dataset)
        .map(|(p, s)| {
            let mut acc = 0.0;
            for (a, b) in p.iter().zip(&s.y) {
                let d = a - b;
                acc += d * d;
            }
            acc / p.len() as f64
        })
        .collect())
}

/// Evaluates one model on a dataset.
pub fn eval_model(
    arch: &ArchConfig,
    model: &ModelParams,
    dataset: &[Sample],
    denominator: RelativeDenominator,
) -> Result<MetricSet> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let preds = predictions(arch, model, dataset)?;
    let n_pixels = dataset.iter().map(|s| s.y.len()).sum::<usize>();
    let inv_n = 1.0 / n_pixels as f64;

    let mut sq_terms = Vec::with_capacity(n_pixels);
    let mut log_terms = Vec::with_capacity(n_pixels);
    let mut ard_terms = Vec::with_capacity(n_pixels);
    let mut srd_terms = Vec::with_capacity(n_pixels);
    let mut angles = Vec::with_capacity(dataset.len());
    let mut skipped = 0usize;

    for (pred, sample) in preds.iter().zip(dataset) {
        for (&d, &d_star) in pred.iter().zip(&sample.y) {
            let diff = d - d_star;
            sq_terms.push(diff * diff);
            let log_diff = math::ln(d.max(VALUE_FLOOR)) - math::ln(d_star.max(VALUE_FLOOR));
            log_terms.push(log_diff * log_diff);
            let denom = match denominator {
                RelativeDenominator::Estimated => d,
                RelativeDenominator::GroundTruth => d_star,
            }
            .max(VALUE_FLOOR);
            let rel = math::abs(diff) / denom;
            ard_terms.push(rel);
            srd_terms.push(rel * rel);
        }
        let norm_pred = math::sqrt(math::norm_sq(pred));
        let norm_target = math::sqrt(math::norm_sq(&sample.y));
        if norm_pred < NORM_FLOOR || norm_target < NORM_FLOOR {
            skipped += 1;
            continue;
        }
        let cos = (math::dot(pred, &sample.y) / (norm_pred * norm_target)).clamp(-1.0, 1.0);
        angles.push(math::acos(cos) * 180.0 / core::f64::consts::PI);
    }

    let sum_sq = math::exact_sum(&sq_terms);
    let (mean, median, f11, f22, f30) = if angles.is_empty() {
        (0.0, 0.0, 0.0, 0.0, 0.0)
    } else {
        let count = angles.len() as f64;
        let mean = math::exact_sum(&angles) / count;
        let mut sorted = angles.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("angles are finite"));
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        let frac = |t: f64| sorted.iter().filter(|&&a| a <= t).count() as f64 / count;
        (mean, median, frac(11.25), frac(22.5), frac(30.0))
    };

    Ok(MetricSet {
        mse: sum_sq * inv_n,
        rmse_lin: math::sqrt(sum_sq) * inv_n,
        rmse_log: math::sqrt(math::exact_sum(&log_terms)) * inv_n,
        ard: math::exact_sum(&ard_terms) * inv_n,
        srd: math::exact_sum(&srd_terms) * inv_n,
        angular_mean_deg: mean,
        angular_median_deg: median,
        frac_within_11_25: f11,
        frac_within_22_5: f22,
        frac_within_30: f30,
        angular_skipped: skipped,
    })
}

/// Percentage of samples on which model A's error beats model B's, ties
/// counted half. The complementary pair is computed in a canonical
/// orientation so `win_rate(a, b) + win_rate(b, a)` is exactly 100.
pub fn win_rate(errors_a: &[f64], errors_b: &[f64]) -> Result<f64> {
    if errors_a.len() != errors_b.len() {
        return Err(Error::DimensionMismatch {
            context: "win rate inputs",
            expected: errors_a.len(),
            found: errors_b.len(),
        });
    }
    if errors_a.is_empty() {
        return Err(Error::Empty("win rate inputs"));
    }
    let mut wins = 0usize;
    let mut ties = 0usize;
    for (&a, &b) in errors_a.iter().zip(errors_b) {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("win rate errors"));
        }
        if a < b {
            wins += 1;
        } else if a == b {
            ties += 1;
        }
    }
    let n = errors_a.len() as f64;
    let score = wins as f64 + 0.5 * ties as f64;
    Ok(if 2.0 * score <= n {
        score * 100.0 / n
    } else {
        100.0 - (n - score) * 100.0 / n
    })
}

/// Per (model, task) metric entry of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub model: String,
    pub task: String,
    pub metrics: MetricSet,
}

/// One pairwise win rate on a task's per-sample MSE.
#[derive(Debug, Clone, PartialEq)]
pub struct WinRateEntry {
    pub task: String,
    pub model_a: String,
    pub model_b: String,
    pub percent: f64,
}

/// Full comparison report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
    pub win_rates: Vec<WinRateEntry>,
    pub n_test: usize,
    pub seed: u64,
    pub arch_fingerprint: u64,
}

impl EvalReport {
    pub fn metrics_for(&self, model: &str, task: &str) -> Option<&MetricSet> {
        self.entries
            .iter()
            .find(|e| e.model == model && e.task == task)
            .map(|e| &e.metrics)
    }

    pub fn win_rate_for(&self, task: &str, a: &str, b: &str) -> Option<f64> {
        self.win_rates
            .iter()
            .find(|w| w.task == task && w.model_a == a && w.model_b == b)
            .map(|w| w.percent)
    }
}

/// Evaluates every named model on a fresh test set of every task and
/// computes all pairwise win rates on per-sample MSE.
pub fn build_report(
    world: &WorldConfig,
    arch: &ArchConfig,
    models: &[(String, ModelParams)],
    n_test: usize,
    seed: u64,
) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    arch.validate_for_world(world)?;
    let mut entries = Vec::new();
    let mut win_rates = Vec::new();
    for (task_idx, task) in world.tasks.iter().enumerate() {
        let test_seed = seed_for(seed, purpose::EVAL_TEST, task_idx as u32, 0);
        let test = make_dataset(world, task, n_test, test_seed)?;
        let mut errors: Vec<Vec<f64>> = Vec::with_capacity(models.len());
        for (name, model) in models {
            entries.push(EvalEntry {
                model: name.clone(),
                task: task.task_id.clone(),
                metrics: eval_model(arch, model, &test, RelativeDenominator::Estimated)?,
            });
            errors.push(per_sample_mse(arch, model, &test)?);
        }
        for (i, (name_a, _)) in models.iter().enumerate() {
            for (j, (name_b, _)) in models.iter().enumerate() {
                win_rates.push(WinRateEntry {
                    task: task.task_id.clone(),
                    model_a: name_a.clone(),
                    model_b: name_b.clone(),
                    percent: win_rate(&errors[i], &errors[j])?,
                });
            }
        }
    }
    Ok(EvalReport {
        entries,
        win_rates,
        n_test,
        seed,
        arch_fingerprint: arch.fingerprint(),
    })
}

/// Trains a supervised oracle on a task, using the same procedure as bank
/// models. The evaluation harness is the only place where a zero-shot
/// task's ground truth may be consumed; nothing here flows back into
/// meta-network training.
pub fn train_supervised_oracle(
    world: &WorldConfig,
    task_id: &str,
    arch: &ArchConfig,
    l: usize,
    epochs: usize,
    hyper: &BaseHyper,
    seed: u64,
) -> Result<ModelParams> {
    let task = world.task(task_id)?;
    bank::train_task_model(world, task, arch, l, epochs, hyper, seed)
}

/// Mean-of-known-parameters baseline: the average of the banks' index-0
/// combined vectors.
pub fn mean_params_baseline(arch: &ArchConfig, banks: &[ParameterBank]) -> Result<ModelParams> {
    if banks.is_empty() {
        return Err(Error::Empty("banks"));
    }
    let mut acc = alloc::vec![0.0; arch.combined_params()];
    for bank in banks {
        let model = bank.models.first().ok_or(Error::Empty("bank"))?;
        let combined = model.combined(arch)?;
        for (a, &v) in acc.iter_mut().zip(combined.values()) {
            *a += v;
        }
    }
    let inv = 1.0 / banks.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    let combined = arch.combined_vector(acc)?;
    ModelParams::from_combined(arch, &combined, "mean_params", 0, 0.0)
}

/// Random-initialization baseline.
pub fn random_baseline(arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
    let enc_seed = derive_seed(seed, 0);
    let dec_seed = derive_seed(seed, 1);
    Ok(ModelParams {
        theta_e: nn::init(&arch.encoder, enc_seed),
        theta_d: nn::init(&arch.decoder, dec_seed),
        task_id: "random_init".into(),
        train_seed: seed,
        final_loss: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use alloc::vec;

    /// Identity-ish model good enough for metric mechanics: not used for
    /// prediction quality, just wiring.
    fn tiny_setup() -> (WorldConfig, ArchConfig, ModelParams) {
        let mut world = WorldConfig::default_world(1);
        world.patch_side = 3;
        let arch = ArchConfig {
            encoder: nn::MlpSpec::tanh_hidden(vec![9, 5]).unwrap(),
            decoder: nn::MlpSpec::tanh_hidden(vec![5, 9]).unwrap(),
        };
        let model = ModelParams {
            theta_e: nn::init(&arch.encoder, 2),
            theta_d: nn::init(&arch.decoder, 3),
            task_id: "autoencode".into(),
            train_seed: 0,
            final_loss: 0.0,
        };
        (world, arch, model)
    }

    /// Metric formulas evaluated directly on given (prediction, target)
    /// pairs via a rigged identity architecture: the "encoder" and
    /// "decoder" are identity layers, so predictions equal inputs.
    fn eval_pairs(
        d: &[f64],
        d_star: &[f64],
        denominator: RelativeDenominator,
    ) -> MetricSet {
        let n = d.len();
        let enc = nn::MlpSpec::tanh_hidden(vec![n, n]).unwrap();
        let dec = nn::MlpSpec::tanh_hidden(vec![n, n]).unwrap();
        let arch = ArchConfig {
            encoder: enc.clone(),
            decoder: dec.clone(),
        };
        let mut id = vec![0.0; enc.param_count()];
        for i in 0..n {
            id[i * n + i] = 1.0;
        }
        let model = ModelParams {
            theta_e: nn::ParamVector::for_spec(&enc, id.clone()).unwrap(),
            theta_d: nn::ParamVector::for_spec(&dec, id).unwrap(),
            task_id: "identity".into(),
            train_seed: 0,
            final_loss: 0.0,
        };
        let data = vec![Sample {
            x: d.to_vec(),
            y: d_star.to_vec(),
        }];
        eval_model(&arch, &model, &data, denominator).unwrap()
    }

    #[test]
    fn perfect_predictions_zero_all_error_metrics() {
        let m = eval_pairs(&[0.4, 0.7, 0.2], &[0.4, 0.7, 0.2], RelativeDenominator::Estimated);
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.rmse_lin, 0.0);
        assert_eq!(m.rmse_log, 0.0);
        assert_eq!(m.ard, 0.0);
        assert_eq!(m.srd, 0.0);
        assert_eq!(m.frac_within_11_25, 1.0);
        assert_eq!(m.frac_within_22_5, 1.0);
        assert_eq!(m.frac_within_30, 1.0);
        assert_eq!(m.angular_skipped, 0);
    }

    #[test]
    fn two_pixel_hand_instance_matches_printed_formulas() {
        let m = eval_pairs(&[1.0, 2.0], &[1.0, 1.0], RelativeDenominator::Estimated);
        // ARD = (1/2) * (0/1 + 1/2)
        assert!((m.ard - 0.25).abs() < 1e-12, "ard {}", m.ard);
        // SRD = (1/2) * (0 + (1/2)^2)
        assert!((m.srd - 0.125).abs() < 1e-12, "srd {}", m.srd);
        // RMSE(lin) = (1/2) * sqrt(0 + 1)
        assert!((m.rmse_lin - 0.5).abs() < 1e-12, "rmse {}", m.rmse_lin);
        // mse = 1/2
        assert!((m.mse - 0.5).abs() < 1e-12);
        // dividing by ground truth instead: (1/2) * (0/1 + 1/1) = 0.5
        let g = eval_pairs(&[1.0, 2.0], &[1.0, 1.0], RelativeDenominator::GroundTruth);
        assert!((g.ard - 0.5).abs() < 1e-12, "ard by truth {}", g.ard);
    }

    #[test]
    fn opposite_predictions_fail_every_threshold() {
        let m = eval_pairs(&[-0.5, -0.25], &[0.5, 0.25], RelativeDenominator::Estimated);
        // acos amplifies rounding near cos = -1, hence the loose tolerance
        assert!((m.angular_mean_deg - 180.0).abs() < 1e-5);
        assert_eq!(m.frac_within_11_25, 0.0);
        assert_eq!(m.frac_within_22_5, 0.0);
        assert_eq!(m.frac_within_30, 0.0);
    }

    #[test]
    fn near_zero_norms_are_skipped_and_counted() {
        let m = eval_pairs(&[0.0, 0.0], &[0.5, 0.5], RelativeDenominator::Estimated);
        assert_eq!(m.angular_skipped, 1);
        assert_eq!(m.angular_mean_deg, 0.0);
    }

    #[test]
    fn metrics_are_invariant_under_test_set_permutation() {
        let (world, arch, model) = tiny_setup();
        let task = world.task("blur").unwrap();
        let data = make_dataset(&world, task, 16, 5).unwrap();
        let base = eval_model(&arch, &model, &data, RelativeDenominator::Estimated).unwrap();
        let mut rng = Stream::new(9);
        let mut shuffled = data.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.below(i + 1));
        }
        let perm = eval_model(&arch, &model, &shuffled, RelativeDenominator::Estimated).unwrap();
        assert_eq!(base, perm);
    }

    #[test]
    fn scaling_both_inputs_scales_rmse_and_fixes_relatives() {
        let d = [0.8, 1.4, 2.0];
        let ds = [1.0, 1.2, 1.8];
        let base = eval_pairs(&d, &ds, RelativeDenominator::Estimated);
        let c = 3.0;
        let d2: Vec<f64> = d.iter().map(|v| v * c).collect();
        let ds2: Vec<f64> = ds.iter().map(|v| v * c).collect();
        let scaled = eval_pairs(&d2, &ds2, RelativeDenominator::Estimated);
        assert!((scaled.ard - base.ard).abs() < 1e-12);
        assert!((scaled.srd - base.srd).abs() < 1e-12);
        assert!((scaled.rmse_lin - c * base.rmse_lin).abs() < 1e-12);
    }

    #[test]
    fn win_rate_examples_are_exact() {
        assert_eq!(win_rate(&[0.1, 0.2, 0.3], &[0.5, 0.5, 0.5]).unwrap(), 100.0);
        assert_eq!(win_rate(&[0.4, 0.4], &[0.4, 0.4]).unwrap(), 50.0);
        // 2 wins, 1 loss, 1 tie over 4
        assert_eq!(
            win_rate(&[0.1, 0.1, 0.9, 0.5], &[0.2, 0.2, 0.1, 0.5]).unwrap(),
            62.5
        );
        assert!(win_rate(&[0.1], &[0.1, 0.2]).is_err());
        assert!(win_rate(&[], &[]).is_err());
        assert!(win_rate(&[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn win_rates_are_exactly_complementary() {
        let mut rng = Stream::new(33);
        for n in [1usize, 3, 6, 7, 64, 100] {
            let a: Vec<f64> = (0..n).map(|_| rng.below(4) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.below(4) as f64).collect();
            let ab = win_rate(&a, &b).unwrap();
            let ba = win_rate(&b, &a).unwrap();
            assert_eq!(ab + ba, 100.0, "n={n}: {ab} + {ba}");
        }
    }

    #[test]
    fn report_covers_all_models_tasks_and_self_ties() {
        let (world, arch, model) = tiny_setup();
        let other = ModelParams {
            theta_e: nn::init(&arch.encoder, 7),
            theta_d: nn::init(&arch.decoder, 8),
            ..model.clone()
        };
        let models = vec![("oracle".into(), model), ("other".into(), other)];
        let report = build_report(&world, &arch, &models, 8, 1).unwrap();
        assert_eq!(report.entries.len(), world.k() * 2);
        assert_eq!(report.win_rates.len(), world.k() * 4);
        for task in &world.tasks {
            assert_eq!(
                report.win_rate_for(&task.task_id, "oracle", "oracle"),
                Some(50.0)
            );
            let ab = report
                .win_rate_for(&task.task_id, "oracle", "other")
                .unwrap();
            let ba = report
                .win_rate_for(&task.task_id, "other", "oracle")
                .unwrap();
            assert_eq!(ab + ba, 100.0);
        }
        // determinism
        let again = build_report(&world, &arch, &models, 8, 1).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn mean_baseline_averages_bank_leads() {
        let (_, arch, model) = tiny_setup();
        let mk = |seed: u64| ParameterBank {
            task_id: alloc::format!("t{seed}"),
            arch_fingerprint: arch.fingerprint(),
            models: vec![ModelParams {
                theta_e: nn::init(&arch.encoder, seed),
                theta_d: nn::init(&arch.decoder, seed + 100),
                ..model.clone()
            }],
        };
        let banks = vec![mk(1), mk(2)];
        let mean = mean_params_baseline(&arch, &banks).unwrap();
        let a = banks[0].models[0].combined(&arch).unwrap();
        let b = banks[1].models[0].combined(&arch).unwrap();
        let m = mean.combined(&arch).unwrap();
        for ((x, y), z) in a.values().iter().zip(b.values()).zip(m.values()) {
            assert!((0.5 * (x + y) - z).abs() < 1e-15);
        }
    }
}
