//! Optimization: AdamW with decoupled weight decay, the Stage-II training
//! loop (KL warm-up, early stopping on validation loss, prototype EMA,
//! best-checkpoint retention), deterministic cohort splitting, and the
//! small trajectory autoencoder behind the LEARNED descriptor backend.
//!
//! Determinism: all shuffling and noise comes from ChaCha streams derived
//! from the config seed, and per-item gradients are reduced in batch order,
//! so two runs with the same seed produce bit-identical loss sequences
//! regardless of worker count.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RepcmError, Result};
use crate::mesh::{MeshSequence, RegionPartition};
use crate::model::layers::ParamSet;
use crate::model::{PreparedSubject, RepcmModel};
use crate::partition::DescriptorEncoder;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs on validation total loss.
    pub patience: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of `max_epochs` over which beta ramps linearly to its
    /// configured value.
    pub beta_warmup_fraction: f64,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    /// Optional hard cap on optimizer steps (smoke tests).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            max_epochs: 500,
            patience: 25,
            weight_decay: 1e-2,
            seed: 0,
            beta_warmup_fraction: 0.1,
            grad_clip: 1.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(RepcmError::InvalidArgument(
                "learning_rate, batch_size and max_epochs must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.beta_warmup_fraction) {
            return Err(RepcmError::InvalidArgument("beta_warmup_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Subject-level 7:1:2 split, deterministic in (subject ids, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn split_cohort(subject_ids: &[String], seed: u64) -> CohortSplit {
    let mut ids: Vec<String> = subject_ids.to_vec();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5011_u64);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = ((0.7 * n as f64).floor() as usize).max(1).min(n);
    let n_val = if n > n_train {
        ((0.1 * n as f64).floor() as usize).max(1).min(n - n_train)
    } else {
        0
    };
    CohortSplit {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    }
}

/// AdamW with decoupled weight decay over a [`ParamSet`].
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
}

impl AdamW {
    pub fn new(params: &ParamSet, learning_rate: f64, weight_decay: f64) -> AdamW {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            m: (0..params.len()).map(|i| Array2::zeros(params.value(i).dim())).collect(),
            v: (0..params.len()).map(|i| Array2::zeros(params.value(i).dim())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let p = params.value_mut(i);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= self.learning_rate * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * *p);
            });
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm: f64 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_rec: f64,
    pub train_kl: f64,
    pub val_total: f64,
    pub beta: f64,
    pub gate_histogram: Vec<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub rec: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

pub struct FitResult {
    /// Model restored to the best-validation checkpoint.
    pub model: RepcmModel,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub split: CohortSplit,
}

fn beta_at(epoch: usize, cfg: &TrainConfig, beta_max: f64) -> f64 {
    let warmup = ((cfg.beta_warmup_fraction * cfg.max_epochs as f64).ceil() as usize).max(1);
    beta_max * (((epoch + 1) as f64) / warmup as f64).min(1.0)
}

fn first_non_finite(model: &RepcmModel, grads: Option<&[Array2<f64>]>) -> String {
    for (name, value) in model.params.iter() {
        if !value.iter().all(|v| v.is_finite()) {
            return name.to_string();
        }
    }
    if !model.prototypes.iter().all(|v| v.is_finite()) {
        return "buffers/prototypes".to_string();
    }
    if let Some(grads) = grads {
        for (i, g) in grads.iter().enumerate() {
            if !g.iter().all(|v| v.is_finite()) {
                return format!("grad:{}", model.params.name(i));
            }
        }
    }
    "loss".to_string()
}

/// Train the completion model: per step, encode the posterior, evaluate the
/// MoE prior from the shape stream, reparameterize, decode, take an AdamW
/// step on rec + beta * KL, then update the prototypes by EMA. Validation
/// runs with zero latent noise; the best-validation parameters are retained.
pub fn fit(
    model: RepcmModel,
    cohort: &[MeshSequence],
    partition: &RegionPartition,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let mut model = model;
    if partition.region_count != model.config.regions {
        return Err(RepcmError::InvalidArgument(format!(
            "partition R={} does not match model R={}",
            partition.region_count, model.config.regions
        )));
    }
    let ids: Vec<String> = cohort.iter().map(|s| s.subject_id.clone()).collect();
    let split = split_cohort(&ids, cfg.seed);
    let index_of = |id: &String| -> usize { cohort.iter().position(|s| &s.subject_id == id).expect("id from cohort") };
    let train_idx: Vec<usize> = split.train.iter().map(index_of).collect();
    let val_idx: Vec<usize> = split.val.iter().map(index_of).collect();
    if train_idx.is_empty() {
        return Err(RepcmError::EmptyInput("training split".into()));
    }

    let adjacency = partition.adjacency_f64();
    let prepare = |idx: &[usize]| -> Result<Vec<PreparedSubject>> {
        idx.par_iter()
            .map(|&i| model.prepare_training_subject(&cohort[i], partition))
            .collect()
    };
    let train_items = prepare(&train_idx)?;
    let val_items = prepare(&val_idx)?;

    let latent = model.config.latent_dim;
    let beta_max = model.config.beta;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x2));
    let mut optimizer = AdamW::new(&model.params, cfg.learning_rate, cfg.weight_decay);

    let mut steps: Vec<StepRecord> = Vec::new();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<(ParamSet, Array2<f64>)> = None;
    let mut since_best = 0usize;
    let mut global_step = 0usize;
    let zero_noise = Array1::<f64>::zeros(latent);

    'training: for epoch in 0..cfg.max_epochs {
        let epoch_start = Instant::now();
        let beta = beta_at(epoch, cfg, beta_max);
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_rec = 0.0;
        let mut epoch_kl = 0.0;
        let mut epoch_batches = 0usize;
        let mut gate_counts = vec![0.0f64; model.config.experts];
        let mut gate_total = 0.0f64;

        for batch in order.chunks(cfg.batch_size) {
            if let Some(cap) = cfg.max_steps {
                if global_step >= cap {
                    break 'training;
                }
            }
            let noises: Vec<Array1<f64>> = batch
                .iter()
                .map(|_| Array1::from_shape_fn(latent, |_| StandardNormal.sample(&mut noise_rng)))
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let results: Vec<Result<_>> = batch
                .par_iter()
                .zip(noises.par_iter())
                .map(|(&bi, noise)| model.loss_and_grads(&train_items[bi], &adjacency, noise, beta, scale))
                .collect();

            let mut batch_grads: Option<Vec<Array2<f64>>> = None;
            let mut rec = 0.0;
            let mut kl = 0.0;
            let mut embeddings = Vec::with_capacity(batch.len());
            let mut gates = Vec::with_capacity(batch.len());
            for r in results {
                let (artifacts, grads) = match r {
                    Ok(v) => v,
                    Err(RepcmError::NonFinite(what)) => {
                        return Err(RepcmError::Diverged(format!(
                            "non-finite value in {what} at step {global_step}; first non-finite tensor: {}",
                            first_non_finite(&model, None)
                        )))
                    }
                    Err(e) => return Err(e),
                };
                rec += artifacts.loss.rec;
                kl += artifacts.loss.kl;
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            *a += &g;
                        }
                    }
                }
                let mut arg = 0;
                for (e, &g) in artifacts.gates.iter().enumerate() {
                    if g > artifacts.gates[arg] {
                        arg = e;
                    }
                }
                gate_counts[arg] += 1.0;
                gate_total += 1.0;
                embeddings.push(artifacts.e_s);
                gates.push(artifacts.gates);
            }
            let mut grads = batch_grads.expect("non-empty batch");
            rec /= batch.len() as f64;
            kl /= batch.len() as f64;
            let total = rec + beta * kl;
            if !total.is_finite() {
                return Err(RepcmError::Diverged(format!(
                    "non-finite loss at step {global_step}; first non-finite tensor: {}",
                    first_non_finite(&model, Some(&grads))
                )));
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            optimizer.step(&mut model.params, &grads);
            crate::model::moe::update_prototypes(
                &mut model.prototypes,
                model.config.prototype_momentum,
                &embeddings,
                &gates,
            );
            steps.push(StepRecord {
                step: global_step,
                epoch,
                rec,
                kl,
                beta,
                total,
            });
            epoch_rec += rec;
            epoch_kl += kl;
            epoch_batches += 1;
            global_step += 1;
        }
        if epoch_batches == 0 {
            break;
        }

        // validation with zero latent noise
        let val_total = if val_items.is_empty() {
            epoch_rec / epoch_batches as f64 + beta * (epoch_kl / epoch_batches as f64)
        } else {
            let totals: Vec<Result<f64>> = val_items
                .par_iter()
                .map(|item| Ok(model.loss_only(item, &adjacency, &zero_noise, beta)?.loss.total))
                .collect();
            let mut acc = 0.0;
            for t in totals {
                acc += t?;
            }
            acc / val_items.len() as f64
        };
        if !val_total.is_finite() {
            return Err(RepcmError::Diverged(format!(
                "non-finite validation loss at epoch {epoch}; first non-finite tensor: {}",
                first_non_finite(&model, None)
            )));
        }

        let histogram: Vec<f64> = gate_counts.iter().map(|c| c / gate_total.max(1.0)).collect();
        epochs.push(EpochRecord {
            epoch,
            train_rec: epoch_rec / epoch_batches as f64,
            train_kl: epoch_kl / epoch_batches as f64,
            val_total,
            beta,
            gate_histogram: histogram,
            wall_seconds: epoch_start.elapsed().as_secs_f64(),
        });

        if val_total < best_val {
            best_val = val_total;
            best_epoch = epoch;
            best_params = Some((model.params.clone(), model.prototypes.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    if let Some((params, prototypes)) = best_params {
        model.params = params;
        model.prototypes = prototypes;
    } else {
        // max_steps hit before the first epoch completed: keep current state
        best_val = f64::NAN;
    }

    Ok(FitResult {
        model,
        epochs,
        steps,
        best_epoch,
        best_val,
        split,
    })
}

/// Mean vertex RMSE (mm) of deterministic completions over given subjects.
pub fn completion_vtx_rmse(
    model: &RepcmModel,
    subjects: &[&MeshSequence],
    partition: &RegionPartition,
) -> Result<f64> {
    if subjects.is_empty() {
        return Err(RepcmError::EmptyInput("subjects for completion RMSE".into()));
    }
    let values: Vec<Result<f64>> = subjects
        .par_iter()
        .map(|seq| {
            let completion = model.complete(&seq.ed_frame(), partition, None)?;
            let mask = vec![true; seq.topology.vertex_count()];
            crate::metrics::vtx_rmse(&completion.frames, &seq.frames, &mask)
        })
        .collect();
    let mut acc = 0.0;
    for v in values {
        acc += v?;
    }
    Ok(acc / subjects.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescriptorAeConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop when the epoch reconstruction MSE drops below
    /// `tolerance * input variance`.
    pub tolerance: f64,
    pub seed: u64,
    /// Trajectory rows are divided by this before encoding.
    pub input_scale: f64,
}

impl Default for DescriptorAeConfig {
    fn default() -> Self {
        DescriptorAeConfig {
            hidden: 64,
            learning_rate: 1e-3,
            max_epochs: 80,
            batch_size: 256,
            tolerance: 0.05,
            seed: 0,
            input_scale: 50.0,
        }
    }
}

/// Train the per-vertex trajectory autoencoder (3T -> hidden -> d -> hidden
/// -> 3T, weights shared across vertices and subjects) and return its
/// encoder half for the LEARNED descriptor backend.
pub fn fit_descriptor_autoencoder(
    cohort: &[MeshSequence],
    d: usize,
    cfg: &DescriptorAeConfig,
) -> Result<DescriptorEncoder> {
    use crate::autodiff::Tape;
    use crate::model::layers::{glorot, Init, Linear, ParamSet as Ps};

    if cohort.is_empty() {
        return Err(RepcmError::EmptyInput("cohort for descriptor autoencoder".into()));
    }
    let t3 = 3 * cohort[0].num_frames();
    if d == 0 || d > t3 {
        return Err(RepcmError::InvalidArgument(format!("descriptor dim d={d} outside 1..={t3}")));
    }
    // stack every subject's per-vertex flattened trajectory
    let n = cohort[0].topology.vertex_count();
    let mut rows = Array2::<f64>::zeros((cohort.len() * n, t3));
    for (si, seq) in cohort.iter().enumerate() {
        let flat = crate::mesh::ed_relative(seq).flatten_per_vertex();
        if flat.dim() != (n, t3) {
            return Err(RepcmError::shape(format!("{n} x {t3} rows"), format!("{:?}", flat.dim())));
        }
        rows.slice_mut(ndarray::s![si * n..(si + 1) * n, ..])
            .assign(&flat.mapv(|v| v / cfg.input_scale));
    }
    let variance = {
        let mean = rows.mean().unwrap_or(0.0);
        rows.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows.len() as f64
    };
    let target_mse = cfg.tolerance * variance.max(1e-12);

    let mut ps = Ps::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let enc1 = Linear::new(&mut ps, "enc1", t3, cfg.hidden, true, Init::Glorot, &mut rng);
    let enc2 = Linear::new(&mut ps, "enc2", cfg.hidden, d, true, Init::Glorot, &mut rng);
    let dec1 = Linear::new(&mut ps, "dec1", d, cfg.hidden, true, Init::Glorot, &mut rng);
    let dec2 = Linear::new(&mut ps, "dec2", cfg.hidden, t3, true, Init::Glorot, &mut rng);
    let _ = glorot; // shared init helper already used via Linear

    let mut optimizer = AdamW::new(&ps, cfg.learning_rate, 0.0);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7));
    let total_rows = rows.nrows();

    for _epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..total_rows).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Array2::zeros((chunk.len(), t3));
            for (bi, &ri) in chunk.iter().enumerate() {
                batch.row_mut(bi).assign(&rows.row(ri));
            }
            let mut tape = Tape::new();
            let bind = ps.bind(&mut tape);
            let x = tape.constant(batch);
            let h1 = enc1.forward(&mut tape, &bind, x);
            let h1 = tape.silu(h1);
            let z = enc2.forward(&mut tape, &bind, h1);
            let h2 = dec1.forward(&mut tape, &bind, z);
            let h2 = tape.silu(h2);
            let xhat = dec2.forward(&mut tape, &bind, h2);
            let diff = tape.sub(xhat, x);
            let sq = tape.mul(diff, diff);
            let sum = tape.sum_all(sq);
            let loss = tape.scale(sum, 1.0 / (chunk.len() * t3) as f64);
            let loss_value = tape.value(loss)[[0, 0]];
            if !loss_value.is_finite() {
                return Err(RepcmError::Diverged("descriptor autoencoder loss is non-finite".into()));
            }
            let grads = tape.backward(loss);
            let grad_vec: Vec<Array2<f64>> = (0..ps.len()).map(|i| grads.get(bind.var_at(i), &tape)).collect();
            optimizer.step(&mut ps, &grad_vec);
            epoch_loss += loss_value;
            batches += 1;
        }
        if epoch_loss / batches as f64 <= target_mse {
            break;
        }
    }

    Ok(DescriptorEncoder {
        w1: ps.value(enc1.w.index()).clone(),
        b1: ps.value(enc1.b.unwrap().index()).clone(),
        w2: ps.value(enc2.w.index()).clone(),
        b2: ps.value(enc2.b.unwrap().index()).clone(),
        input_scale: cfg.input_scale,
    })
}
