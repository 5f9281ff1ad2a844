//! Task-basis significance analysis.
//!
//! Trained (and regressed) parameter vectors are embedded into a
//! low-dimensional space by a parameter autoencoder, the embeddings of one
//! representative per task form a task matrix W, and W is factorized into
//! W = L * S with unit-norm basis columns in L and L1-sparsified
//! coefficients in S. A source task's importance for a zero-shot task is
//! the number of basis elements whose coefficients agree within a
//! tolerance.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::bank::{ArchConfig, ModelParams, DIVERGENCE_GUARD};
use crate::math;
use crate::nn::{self, LossKind, MlpSpec, OptimHyper, OptimizerState, ParamVector};
use crate::rng::{purpose, seed_for};
use crate::world::{make_dataset, WorldConfig};
use crate::{Error, Result};

/// Embedding and basis dimensions of the original large-scale analysis
/// (latent space 100, basis count 8).
pub const PAPER_SCALE_BASIS: (usize, usize) = (100, 8);

/// Desk-scale defaults: latent space 16, basis count 4.
pub const DESK_BASIS: (usize, usize) = (16, 4);

/// Architecture and training configuration of the parameter autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpec {
    /// Flattened (encoder, decoder) parameter vector -> R^r.
    pub encoder: MlpSpec,
    /// R^r -> reconstructed parameter vector.
    pub decoder: MlpSpec,
    /// Data network the embedded vectors parameterize.
    pub arch: ArchConfig,
    /// Weight of the data-consistency term on reconstructed parameters.
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub consistency_batch: usize,
}

impl EmbeddingSpec {
    /// Default desk-scale embedding: P -> 64 -> r and back, tanh hidden.
    pub fn default_for_arch(arch: ArchConfig, r: usize) -> Result<Self> {
        let p = arch.combined_params();
        Ok(EmbeddingSpec {
            encoder: MlpSpec::tanh_hidden(vec![p, 64, r])?,
            decoder: MlpSpec::tanh_hidden(vec![r, 64, p])?,
            arch,
            lambda: 0.1,
            lr: 0.001,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 60,
            consistency_batch: 8,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.arch.combined_params();
        if self.encoder.input_dim() != p {
            return Err(Error::DimensionMismatch {
                context: "embedding encoder input vs combined params",
                expected: p,
                found: self.encoder.input_dim(),
            });
        }
        if self.decoder.output_dim() != p {
            return Err(Error::DimensionMismatch {
                context: "embedding decoder output vs combined params",
                expected: p,
                found: self.decoder.output_dim(),
            });
        }
        if self.encoder.output_dim() != self.decoder.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "embedding latent dims",
                expected: self.decoder.input_dim(),
                found: self.encoder.output_dim(),
            });
        }
        if self.lambda < 0.0 || !(self.lr > 0.0) || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "embedding training config must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }
}

/// A trained parameter autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEmbedding {
    pub spec: EmbeddingSpec,
    pub encoder: ParamVector,
    pub decoder: ParamVector,
    /// Mean reconstruction loss per epoch (first entry: before training).
    pub recon_trace: Vec<f64>,
}

/// Trains the parameter autoencoder on flattened (encoder, decoder) vectors
/// with reconstruction MSE plus a data-consistency term on the
/// reconstructed parameters, evaluated on each vector's own task data.
pub fn train_param_embedding(
    models: &[ModelParams],
    spec: &EmbeddingSpec,
    world: &WorldConfig,
    seed: u64,
) -> Result<ParamEmbedding> {
    spec.validate()?;
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    {
        let mut distinct: Vec<&str> = models.iter().map(|m| m.task_id.as_str()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::InvalidConfig(
                "embedding training needs models from at least 2 tasks".into(),
            ));
        }
    }
    let p = spec.arch.combined_params();
    let flat: Vec<Vec<f64>> = models
        .iter()
        .map(|m| m.combined(&spec.arch).map(|v| v.into_values()))
        .collect::<Result<_>>()?;

    let mut enc = nn::init(&spec.encoder, seed_for(seed, purpose::BASIS_EMBED, 0, 0));
    let mut dec = nn::init(&spec.decoder, seed_for(seed, purpose::BASIS_EMBED, 0, 1));
    let hyper = OptimHyper {
        kind: nn::OptimKind::Adam,
        lr: spec.lr,
        beta1: spec.beta1,
        beta2: spec.beta2,
        eps: spec.eps,
    };
    let mut opt_enc = OptimizerState::new(hyper, spec.encoder.param_count());
    let mut opt_dec = OptimizerState::new(hyper, spec.decoder.param_count());
    let inv_p = 1.0 / p as f64;

    let recon_of = |enc: &ParamVector, dec: &ParamVector, x: &[f64]| -> f64 {
        let latent = nn::forward_raw(&spec.encoder, enc.values(), x);
        let xhat = nn::forward_raw(&spec.decoder, dec.values(), &latent);
        let mut acc = 0.0;
        for (a, b) in xhat.iter().zip(x) {
            let d = a - b;
            acc += d * d * inv_p;
        }
        acc
    };

    let initial: f64 =
        flat.iter().map(|x| recon_of(&enc, &dec, x)).sum::<f64>() / flat.len() as f64;
    let mut trace = vec![initial];
    let mut counter: u32 = 0;
    for _ in 0..spec.epochs {
        let mut epoch_recon = 0.0;
        for (model, x) in models.iter().zip(&flat) {
            let enc_acts = nn::forward_cached(&spec.encoder, enc.values(), x);
            let dec_acts = nn::forward_cached(&spec.decoder, dec.values(), enc_acts.last().unwrap());
            let xhat = dec_acts.last().unwrap();

            let mut recon = 0.0;
            let mut upstream: Vec<f64> = Vec::with_capacity(p);
            for (a, b) in xhat.iter().zip(x) {
                let d = a - b;
                recon += d * d * inv_p;
                upstream.push(2.0 * d * inv_p);
            }
            epoch_recon += recon;
            if !recon.is_finite() || recon > DIVERGENCE_GUARD {
                return Err(Error::Diverged {
                    context: "parameter embedding",
                    loss: recon,
                });
            }

            if spec.lambda > 0.0 && spec.consistency_batch > 0 {
                let task = world.task(&model.task_id)?;
                let batch_seed = seed_for(seed, purpose::BASIS_EMBED, 1, counter);
                let batch = make_dataset(world, task, spec.consistency_batch, batch_seed)?;
                let xhat_pv = spec.arch.combined_vector(xhat.clone())?;
                let (_, data_grad) = nn::functional_loss_and_grad(
                    &spec.arch.encoder,
                    &spec.arch.decoder,
                    &xhat_pv,
                    &batch,
                    LossKind::Mse,
                )?;
                for (u, g) in upstream.iter_mut().zip(data_grad.values()) {
                    *u += spec.lambda * g;
                }
            }
            counter += 1;

            let mut dec_grad = vec![0.0; spec.decoder.param_count()];
            let latent_grad =
                nn::backward_raw(&spec.decoder, dec.values(), &dec_acts, &upstream, &mut dec_grad);
            let mut enc_grad = vec![0.0; spec.encoder.param_count()];
            nn::backward_raw(&spec.encoder, enc.values(), &enc_acts, &latent_grad, &mut enc_grad);

            let mut ev = enc.into_values();
            opt_enc.step_in_place(&mut ev, &enc_grad)?;
            enc = ParamVector::for_spec(&spec.encoder, ev)?;
            let mut dv = dec.into_values();
            opt_dec.step_in_place(&mut dv, &dec_grad)?;
            dec = ParamVector::for_spec(&spec.decoder, dv)?;
        }
        trace.push(epoch_recon / flat.len() as f64);
    }
    Ok(ParamEmbedding {
        spec: spec.clone(),
        encoder: enc,
        decoder: dec,
        recon_trace: trace,
    })
}

/// Embeds one model's flattened parameters into R^r.
pub fn embed_params(embedding: &ParamEmbedding, model: &ModelParams) -> Result<Vec<f64>> {
    let x = model.combined(&embedding.spec.arch)?;
    Ok(nn::forward_raw(
        &embedding.spec.encoder,
        embedding.encoder.values(),
        x.values(),
    ))
}

/// r x K matrix of task embeddings, one column per task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMatrix {
    pub r: usize,
    pub task_ids: Vec<String>,
    /// Column-major storage: column k occupies `k*r..(k+1)*r`.
    pub columns: Vec<f64>,
}

impl TaskMatrix {
    pub fn k(&self) -> usize {
        self.task_ids.len()
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.columns[k * self.r..(k + 1) * self.r]
    }
}

/// Builds the task matrix from one representative model per task.
pub fn build_task_matrix(
    embedding: &ParamEmbedding,
    representatives: &[ModelParams],
) -> Result<TaskMatrix> {
    if representatives.is_empty() {
        return Err(Error::Empty("task representatives"));
    }
    let r = embedding.spec.latent_dim();
    let mut columns = Vec::with_capacity(r * representatives.len());
    let mut task_ids = Vec::with_capacity(representatives.len());
    for model in representatives {
        columns.extend(embed_params(embedding, model)?);
        task_ids.push(model.task_id.clone());
    }
    Ok(TaskMatrix {
        r,
        task_ids,
        columns,
    })
}

/// Result of the alternating factorization W = L * S.
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    pub r: usize,
    pub b: usize,
    pub k: usize,
    /// r x b, row-major; columns have unit L2 norm.
    pub l_mat: Vec<f64>,
    /// b x K, row-major.
    pub s_mat: Vec<f64>,
    /// 0.5 * ||W - LS||_F^2 + l1 * sum|S| after init and each iteration.
    pub objective_trace: Vec<f64>,
    /// ||W - LS||_F / ||W||_F after init and each iteration.
    pub recon_trace: Vec<f64>,
}

impl Factorization {
    pub fn s_column(&self, k: usize) -> Vec<f64> {
        (0..self.b).map(|beta| self.s_mat[beta * self.k + k]).collect()
    }
}

/// One-sided Jacobi SVD of a row-major rows x cols matrix (rows >= cols is
/// not required). Returns (U, sigma, V) with A = U diag(sigma) V^T, singular
/// values sorted descending.
fn jacobi_svd(a: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // column-major working copy
    let mut w: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a[i * cols + j]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut col = vec![0.0; cols];
            col[j] = 1.0;
            col
        })
        .collect();
    let tol = 1e-14;
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = math::dot(&w[p], &w[p]);
                let beta = math::dot(&w[q], &w[q]);
                let gamma = math::dot(&w[p], &w[q]);
                if math::abs(gamma) <= tol * math::sqrt(alpha * beta) || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let theta = 0.5 * math::atan2(2.0 * gamma, alpha - beta);
                let (c, s) = (math::cos(theta), math::sin(theta));
                for i in 0..rows {
                    let wp = w[p][i];
                    let wq = w[q][i];
                    w[p][i] = c * wp + s * wq;
                    w[q][i] = -s * wp + c * wq;
                }
                for i in 0..cols {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp + s * vq;
                    v[q][i] = -s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = w.iter().map(|col| math::sqrt(math::dot(col, col))).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));
    let mut u = vec![0.0; rows * cols];
    let mut sigma = vec![0.0; cols];
    let mut vt_cols = vec![0.0; cols * cols];
    for (slot, &src) in order.iter().enumerate() {
        let n = norms[src];
        sigma[slot] = n;
        if n > 1e-300 {
            for i in 0..rows {
                u[i * cols + slot] = w[src][i] / n;
            }
        }
        for i in 0..cols {
            vt_cols[i * cols + slot] = v[src][i];
        }
    }
    (u, sigma, vt_cols)
}

/// Solves the b x b system `G X = B` for X (B has `nrhs` columns, row-major)
/// by Gaussian elimination with partial pivoting. Returns None on a
/// degenerate pivot.
fn solve_system(g: &[f64], b: usize, rhs: &[f64], nrhs: usize) -> Option<Vec<f64>> {
    let mut a = g.to_vec();
    let mut x = rhs.to_vec();
    for col in 0..b {
        let mut pivot = col;
        for row in (col + 1)..b {
            if math::abs(a[row * b + col]) > math::abs(a[pivot * b + col]) {
                pivot = row;
            }
        }
        if math::abs(a[pivot * b + col]) < 1e-12 {
            return None;
        }
        if pivot != col {
            for j in 0..b {
                a.swap(col * b + j, pivot * b + j);
            }
            for j in 0..nrhs {
                x.swap(col * nrhs + j, pivot * nrhs + j);
            }
        }
        let inv = 1.0 / a[col * b + col];
        for row in (col + 1)..b {
            let factor = a[row * b + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for j in col..b {
                a[row * b + j] -= factor * a[col * b + j];
            }
            for j in 0..nrhs {
                x[row * nrhs + j] -= factor * x[col * nrhs + j];
            }
        }
    }
    for col in (0..b).rev() {
        let inv = 1.0 / a[col * b + col];
        for j in 0..nrhs {
            let mut acc = x[col * nrhs + j];
            for k in (col + 1)..b {
                acc -= a[col * b + k] * x[k * nrhs + j];
            }
            x[col * nrhs + j] = acc * inv;
        }
    }
    Some(x)
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Alternating factorization of the task matrix: least-squares L given S
/// (columns renormalized to unit L2, S rescaled inversely), then per-column
/// coordinate descent on S with L1 soft-thresholding. Initialized from the
/// rank-b truncated SVD of W.
pub fn factorize_task_matrix(
    w: &TaskMatrix,
    b: usize,
    iters: usize,
    l1_weight: f64,
) -> Result<Factorization> {
    let (r, k) = (w.r, w.k());
    if b == 0 || b > r.min(k) {
        return Err(Error::InvalidConfig(alloc::format!(
            "basis count {b} outside 1..=min(r={r}, k={k})"
        )));
    }
    if l1_weight < 0.0 {
        return Err(Error::InvalidConfig("l1 weight must be >= 0".into()));
    }
    // row-major W
    let mut w_rm = vec![0.0; r * k];
    for col in 0..k {
        for row in 0..r {
            w_rm[row * k + col] = w.column(col)[row];
        }
    }
    let (u, sigma, v) = jacobi_svd(&w_rm, r, k);
    let mut l_mat = vec![0.0; r * b];
    for row in 0..r {
        for col in 0..b {
            l_mat[row * b + col] = u[row * k + col];
        }
    }
    let mut s_mat = vec![0.0; b * k];
    for beta in 0..b {
        for col in 0..k {
            // S = Sigma_b V_b^T
            s_mat[beta * k + col] = sigma[beta] * v[col * k + beta];
        }
    }

    let norm_w_sq = math::norm_sq(&w_rm);
    let objective = |l_mat: &[f64], s_mat: &[f64]| -> (f64, f64) {
        let mut resid_sq = 0.0;
        for row in 0..r {
            for col in 0..k {
                let mut acc = 0.0;
                for beta in 0..b {
                    acc += l_mat[row * b + beta] * s_mat[beta * k + col];
                }
                let d = w_rm[row * k + col] - acc;
                resid_sq += d * d;
            }
        }
        let l1: f64 = s_mat.iter().map(|&x| math::abs(x)).sum();
        let obj = 0.5 * resid_sq + l1_weight * l1;
        let rel = if norm_w_sq > 0.0 {
            math::sqrt(resid_sq / norm_w_sq)
        } else {
            0.0
        };
        (obj, rel)
    };

    let (obj0, rel0) = objective(&l_mat, &s_mat);
    let mut objective_trace = vec![obj0];
    let mut recon_trace = vec![rel0];
    let mut best = (l_mat.clone(), s_mat.clone());

    for _ in 0..iters {
        // L step: minimize ||W - L S||_F^2 over L, i.e. solve (S S^T) L^T = S W^T.
        let mut gram = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                let mut acc = 0.0;
                for col in 0..k {
                    acc += s_mat[i * k + col] * s_mat[j * k + col];
                }
                gram[i * b + j] = acc;
            }
        }
        let mut rhs = vec![0.0; b * r];
        for i in 0..b {
            for row in 0..r {
                let mut acc = 0.0;
                for col in 0..k {
                    acc += s_mat[i * k + col] * w_rm[row * k + col];
                }
                rhs[i * r + row] = acc;
            }
        }
        let lt = match solve_system(&gram, b, &rhs, r) {
            Some(x) => x,
            None => {
                // degenerate Gram matrix: retry with a small ridge
                let mut ridged = gram.clone();
                for i in 0..b {
                    ridged[i * b + i] += 1e-8;
                }
                solve_system(&ridged, b, &rhs, r).ok_or_else(|| {
                    Error::InvalidConfig("task matrix factorization is degenerate".into())
                })?
            }
        };
        for row in 0..r {
            for beta in 0..b {
                l_mat[row * b + beta] = lt[beta * r + row];
            }
        }
        // renormalize L columns, rescale S rows inversely
        for beta in 0..b {
            let mut n = 0.0;
            for row in 0..r {
                let v = l_mat[row * b + beta];
                n += v * v;
            }
            let n = math::sqrt(n);
            if n > 1e-12 {
                for row in 0..r {
                    l_mat[row * b + beta] /= n;
                }
                for col in 0..k {
                    s_mat[beta * k + col] *= n;
                }
            }
        }

        // S step: per-column coordinate descent with soft-thresholding.
        let mut gram = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                let mut acc = 0.0;
                for row in 0..r {
                    acc += l_mat[row * b + i] * l_mat[row * b + j];
                }
                gram[i * b + j] = acc;
            }
        }
        for col in 0..k {
            let mut c = vec![0.0; b];
            for (beta, cv) in c.iter_mut().enumerate() {
                let mut acc = 0.0;
                for row in 0..r {
                    acc += l_mat[row * b + beta] * w_rm[row * k + col];
                }
                *cv = acc;
            }
            for _ in 0..50 {
                let mut max_delta = 0.0f64;
                for beta in 0..b {
                    let mut rho = c[beta];
                    for alpha in 0..b {
                        if alpha != beta {
                            rho -= gram[beta * b + alpha] * s_mat[alpha * k + col];
                        }
                    }
                    let denom = gram[beta * b + beta].max(1e-12);
                    let new = soft_threshold(rho, l1_weight) / denom;
                    max_delta = max_delta.max(math::abs(new - s_mat[beta * k + col]));
                    s_mat[beta * k + col] = new;
                }
                if max_delta < 1e-12 {
                    break;
                }
            }
        }

        let (obj, rel) = objective(&l_mat, &s_mat);
        // With L1 > 0 the unit-norm rescale can raise the penalty term by
        // more than the S step recovers; stop at the previous iterate when
        // the objective would rise, keeping the trace monotone.
        if obj > *objective_trace.last().unwrap() {
            let (l_prev, s_prev) = best;
            l_mat = l_prev;
            s_mat = s_prev;
            break;
        }
        objective_trace.push(obj);
        recon_trace.push(rel);
        best = (l_mat.clone(), s_mat.clone());
    }

    Ok(Factorization {
        r,
        b,
        k,
        l_mat,
        s_mat,
        objective_trace,
        recon_trace,
    })
}

/// Default similarity tolerance: a tenth of S's dynamic range.
pub fn default_epsilon(fact: &Factorization) -> f64 {
    let max = fact.s_mat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = fact.s_mat.iter().cloned().fold(f64::INFINITY, f64::min);
    0.1 * (max - min)
}

/// Number of basis elements on which two task columns of S agree within
/// `epsilon` (defaulting to [`default_epsilon`]).
pub fn source_importance(
    fact: &Factorization,
    source_col: usize,
    zero_col: usize,
    epsilon: Option<f64>,
) -> Result<usize> {
    if source_col >= fact.k || zero_col >= fact.k {
        return Err(Error::DimensionMismatch {
            context: "S column index",
            expected: fact.k,
            found: source_col.max(zero_col),
        });
    }
    let eps = epsilon.unwrap_or_else(|| default_epsilon(fact));
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "importance tolerance must be > 0, got {eps}"
        )));
    }
    let count = (0..fact.b)
        .filter(|&beta| {
            let s = fact.s_mat[beta * fact.k + source_col];
            let z = fact.s_mat[beta * fact.k + zero_col];
            math::abs(s - z) <= eps
        })
        .count();
    Ok(count)
}

/// Shared-basis counts of every other column against `zero_col`, sorted by
/// count descending (ties keep column order); ranks are 1-based.
pub fn importance_ranking(
    fact: &Factorization,
    zero_col: usize,
    epsilon: Option<f64>,
) -> Result<Vec<(usize, usize, usize)>> {
    let mut rows: Vec<(usize, usize)> = (0..fact.k)
        .filter(|&c| c != zero_col)
        .map(|c| source_importance(fact, c, zero_col, epsilon).map(|n| (c, n)))
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(i, (col, count))| (col, count, i + 1))
        .collect())
}
