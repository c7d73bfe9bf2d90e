//! Stage II: the region-prior injected conditional VAE.
//!
//! Encoder: distinct positional encodings for the ED shape and the
//! flattened ED-relative trajectories, anchor gathering by farthest point
//! sampling, a Region-Specific Injection block (region pooling, masked
//! SyncAttention, FiLM on both streams), then a trunk of
//! self-attention + SyncAttention layers. The shape stream never reads the
//! motion stream, so the shape pathway (and therefore the prior) is
//! computable from the ED frame alone at completion time.
//!
//! Prior: phenotype-adaptive mixture of experts over the pooled shape
//! embedding ([`moe`]). Posterior: pooled two-stream head. Decoder: latent
//! projected onto anchor tokens, refined by SyncAttention layers, recovered
//! densely by a vertex-to-anchor cross-attention write-back and a linear
//! trajectory head (zero-initialized, so the untrained model predicts the
//! ED frame repeated).

pub mod layers;
pub mod losses;
pub mod moe;

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{RepcmError, Result};
use crate::io;
use crate::mesh::{
    compose_frames, ed_relative, farthest_point_sampling, AnchorSet, MeshSequence, Phenotype,
    RegionPartition, TrajectoryField,
};
use layers::{
    glorot, pool_region_tokens, sinusoidal_features, sync_attention, Binding, Film, Init, Linear,
    MaskMode, ParamSet, PositionalEncoder, SelfAttention, SyncProjections,
};
use losses::GaussianParams;
use moe::{ExpertHeadParams, MoEPrior};

/// Full model hyperparameters. Serialized into every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Anchor count K selected by FPS.
    pub anchors: usize,
    /// Channel width C of anchor and region tokens.
    pub channels: usize,
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Expert count E of the mixture-of-experts prior.
    pub experts: usize,
    /// Region count R the partition must provide.
    pub regions: usize,
    pub mask_mode: MaskMode,
    /// KL weight after warm-up.
    pub beta: f64,
    pub prototype_momentum: f64,
    /// Sinusoidal frequency levels per input scalar.
    pub pe_levels: usize,
    /// Coordinates are divided by this (mm) before encoding; predicted
    /// trajectories are scaled back by it.
    pub normalization_scale: f64,
    /// Frames per sequence T.
    pub frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            anchors: 512,
            channels: 128,
            latent_dim: 16,
            encoder_layers: 8,
            decoder_layers: 8,
            experts: 4,
            regions: 16,
            mask_mode: MaskMode::Additive,
            beta: 1e-3,
            prototype_momentum: 0.99,
            pe_levels: 6,
            normalization_scale: 50.0,
            frames: 25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("anchors", self.anchors),
            ("channels", self.channels),
            ("latent_dim", self.latent_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("experts", self.experts),
            ("regions", self.regions),
            ("pe_levels", self.pe_levels),
            ("frames", self.frames),
        ] {
            if v == 0 {
                return Err(RepcmError::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.beta < 0.0 {
            return Err(RepcmError::InvalidArgument("beta must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.prototype_momentum) {
            return Err(RepcmError::InvalidArgument("prototype_momentum must be in [0, 1]".into()));
        }
        if self.normalization_scale <= 0.0 {
            return Err(RepcmError::InvalidArgument("normalization_scale must be positive".into()));
        }
        Ok(())
    }
}

struct TrunkLayer {
    self_attn: SelfAttention,
    sync: SyncProjections,
}

struct ExpertHead {
    l1: Linear,
    l2: Linear,
}

struct Architecture {
    pe_shape: PositionalEncoder,
    pe_motion: PositionalEncoder,
    inj_sync: SyncProjections,
    film_shape: Film,
    film_motion: Film,
    trunk: Vec<TrunkLayer>,
    post_l1: Linear,
    post_l2: Linear,
    expert_heads: Vec<ExpertHead>,
    dec_z_shape: Linear,
    dec_z_motion: Linear,
    dec_pe_motion: PositionalEncoder,
    dec_layers: Vec<SyncProjections>,
    traj_head: Linear,
}

/// The complete Stage-II model: parameters, prototype buffer, architecture.
pub struct RepcmModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// EMA-updated prototype bank (E x C); not a gradient parameter.
    pub prototypes: Array2<f64>,
    arch: Architecture,
}

impl RepcmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<RepcmModel> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let t3 = 3 * config.frames;
        let latent = config.latent_dim;

        let pe_shape = PositionalEncoder::new(&mut ps, "pe_shape", 3, config.pe_levels, c, &mut rng);
        let pe_motion = PositionalEncoder::new(&mut ps, "pe_motion", t3, config.pe_levels, c, &mut rng);
        let inj_sync = SyncProjections::new(&mut ps, "injection/sync", c, &mut rng);
        let film_shape = Film::new(&mut ps, "injection/film_shape", c, &mut rng);
        let film_motion = Film::new(&mut ps, "injection/film_motion", c, &mut rng);
        let trunk = (0..config.encoder_layers)
            .map(|l| TrunkLayer {
                self_attn: SelfAttention::new(&mut ps, &format!("trunk/{l}/self"), c, &mut rng),
                sync: SyncProjections::new(&mut ps, &format!("trunk/{l}/sync"), c, &mut rng),
            })
            .collect();
        let post_l1 = Linear::new(&mut ps, "posterior/l1", 2 * c, c, true, Init::Glorot, &mut rng);
        let post_l2 = Linear::new(&mut ps, "posterior/l2", c, 2 * latent, true, Init::Glorot, &mut rng);
        let expert_heads = (0..config.experts)
            .map(|e| ExpertHead {
                l1: Linear::new(&mut ps, &format!("moe/expert{e}/l1"), c, c, true, Init::Glorot, &mut rng),
                l2: Linear::new(&mut ps, &format!("moe/expert{e}/l2"), c, 2 * latent, true, Init::Glorot, &mut rng),
            })
            .collect();
        let dec_z_shape = Linear::new(&mut ps, "decoder/z_shape", latent, c, true, Init::Glorot, &mut rng);
        let dec_z_motion = Linear::new(&mut ps, "decoder/z_motion", latent, c, true, Init::Glorot, &mut rng);
        let dec_pe_motion = PositionalEncoder::new(&mut ps, "decoder/pe_motion", 3, config.pe_levels, c, &mut rng);
        let dec_layers = (0..config.decoder_layers)
            .map(|l| SyncProjections::new(&mut ps, &format!("decoder/{l}/sync"), c, &mut rng))
            .collect();
        let traj_head = Linear::new(&mut ps, "decoder/traj_head", c, t3, true, Init::Zero, &mut rng);

        // unit-norm random prototype rows
        let mut prototypes = Array2::from_shape_fn((config.experts, c), |_| {
            use rand::Rng;
            rng.random::<f64>() * 2.0 - 1.0
        });
        for mut row in prototypes.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
        }

        Ok(RepcmModel {
            config,
            params: ps,
            prototypes,
            arch: Architecture {
                pe_shape,
                pe_motion,
                inj_sync,
                film_shape,
                film_motion,
                trunk,
                post_l1,
                post_l2,
                expert_heads,
                dec_z_shape,
                dec_z_motion,
                dec_pe_motion,
                dec_layers,
                traj_head,
            },
        })
    }

    /// Re-initialize every parameter (including the zero-initialized heads)
    /// from the seed. Gradient-check tests use this to put the model at a
    /// generic point where all paths carry gradient.
    pub fn randomize_parameters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..self.params.len() {
            let (rows, cols) = self.params.value(i).dim();
            *self.params.value_mut(i) = glorot(&mut rng, rows, cols);
        }
    }

    /// Snapshot of the MoE prior as plain arrays (the oracle route used by
    /// tests; the training path builds the same math on the tape).
    pub fn moe_prior(&self) -> MoEPrior {
        MoEPrior {
            prototypes: self.prototypes.clone(),
            heads: self
                .arch
                .expert_heads
                .iter()
                .map(|h| ExpertHeadParams {
                    w1: self.params.value(h.l1.w.index()).clone(),
                    b1: self.params.value(h.l1.b.unwrap().index()).clone(),
                    w2: self.params.value(h.l2.w.index()).clone(),
                    b2: self.params.value(h.l2.b.unwrap().index()).clone(),
                })
                .collect(),
            momentum: self.config.prototype_momentum,
        }
    }
}

/// Everything a forward pass needs for one subject, precomputed once:
/// FPS anchors, sinusoidal expansions and normalized targets.
pub struct PreparedSubject {
    pub subject_id: String,
    pub phenotype: Phenotype,
    pub anchors: AnchorSet,
    /// K x (3 * 2L) expansion of normalized anchor ED coordinates.
    pub anchor_pos_feats: Array2<f64>,
    /// K x (3T * 2L) expansion of normalized flattened anchor trajectories
    /// (training inputs only).
    pub anchor_motion_feats: Option<Array2<f64>>,
    /// N x (3 * 2L) expansion of all normalized ED coordinates
    /// (decoder write-back queries).
    pub vertex_pos_feats: Array2<f64>,
    /// N x 3T normalized ED-relative trajectory targets (training only).
    pub target_traj: Option<Array2<f64>>,
    /// N x 3 raw ED frame in mm.
    pub ed_frame: Array2<f64>,
}

impl RepcmModel {
    fn prepare(
        &self,
        ed_frame: &ArrayView2<'_, f64>,
        traj_rows_mm: Option<&Array2<f64>>,
        partition: &RegionPartition,
        subject_id: &str,
        phenotype: Phenotype,
    ) -> Result<PreparedSubject> {
        if partition.region_count != self.config.regions {
            return Err(RepcmError::InvalidArgument(format!(
                "partition has R={} but the model was configured for R={}",
                partition.region_count, self.config.regions
            )));
        }
        let n = ed_frame.nrows();
        if partition.assignment.len() != n {
            return Err(RepcmError::shape(
                format!("partition over {n} vertices"),
                format!("{}", partition.assignment.len()),
            ));
        }
        let scale = self.config.normalization_scale;
        let indices = farthest_point_sampling(ed_frame, self.config.anchors, 0)?;
        let anchors = AnchorSet::from_indices(indices, partition)?;

        let normalized = ed_frame.mapv(|v| v / scale);
        let mut anchor_coords = Array2::zeros((anchors.len(), 3));
        for (row, &vi) in anchors.indices.iter().enumerate() {
            anchor_coords.row_mut(row).assign(&normalized.row(vi));
        }
        let anchor_pos_feats = sinusoidal_features(&anchor_coords.view(), self.config.pe_levels);
        let vertex_pos_feats = sinusoidal_features(&normalized.view(), self.config.pe_levels);

        let (anchor_motion_feats, target_traj) = match traj_rows_mm {
            Some(rows) => {
                if rows.dim() != (n, 3 * self.config.frames) {
                    return Err(RepcmError::shape(
                        format!("{n} x {} trajectory rows", 3 * self.config.frames),
                        format!("{:?}", rows.dim()),
                    ));
                }
                let normalized_rows = rows.mapv(|v| v / scale);
                let mut anchor_rows = Array2::zeros((anchors.len(), 3 * self.config.frames));
                for (row, &vi) in anchors.indices.iter().enumerate() {
                    anchor_rows.row_mut(row).assign(&normalized_rows.row(vi));
                }
                let feats = sinusoidal_features(&anchor_rows.view(), self.config.pe_levels);
                (Some(feats), Some(normalized_rows))
            }
            None => (None, None),
        };

        Ok(PreparedSubject {
            subject_id: subject_id.to_string(),
            phenotype,
            anchors,
            anchor_pos_feats,
            anchor_motion_feats,
            vertex_pos_feats,
            target_traj,
            ed_frame: ed_frame.to_owned(),
        })
    }

    /// Prepare a training subject (full sequence available).
    pub fn prepare_training_subject(
        &self,
        seq: &MeshSequence,
        partition: &RegionPartition,
    ) -> Result<PreparedSubject> {
        if seq.num_frames() != self.config.frames {
            return Err(RepcmError::shape(
                format!("{} frames", self.config.frames),
                format!("{} in {}", seq.num_frames(), seq.subject_id),
            ));
        }
        let rows = ed_relative(seq).flatten_per_vertex();
        self.prepare(&seq.ed_frame(), Some(&rows), partition, &seq.subject_id, seq.phenotype)
    }

    /// Prepare a completion input (ED frame only).
    pub fn prepare_completion_input(
        &self,
        ed_frame: &ArrayView2<'_, f64>,
        partition: &RegionPartition,
        subject_id: &str,
        phenotype: Phenotype,
    ) -> Result<PreparedSubject> {
        self.prepare(ed_frame, None, partition, subject_id, phenotype)
    }
}

struct EncoderOutput {
    x0: Var,
    xt: Option<Var>,
    /// Region-level routing matrix of the injection block.
    injection_routing: Var,
}

struct GaussianVars {
    mean: Var,
    log_variance: Var,
}

struct PriorVars {
    gaussian: GaussianVars,
    gates: Var,
    e_s: Var,
}

impl RepcmModel {
    /// Shared encoder: PE, injection (pool, masked SyncAttention, FiLM),
    /// then the trunk. The motion stream is optional; the shape stream
    /// never depends on it.
    fn encode_streams(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        item: &PreparedSubject,
        adjacency: &Array2<f64>,
    ) -> Result<EncoderOutput> {
        let shape_feats = tape.constant(item.anchor_pos_feats.clone());
        let mut x0 = self.arch.pe_shape.project_features(tape, bind, shape_feats);
        let mut xt = match &item.anchor_motion_feats {
            Some(f) => {
                let feats = tape.constant(f.clone());
                Some(self.arch.pe_motion.project_features(tape, bind, feats))
            }
            None => None,
        };

        let (r0, rt) = pool_region_tokens(tape, x0, xt, &item.anchors.region_ids, self.config.regions)?;
        let sync = sync_attention(
            tape,
            Some((&self.arch.inj_sync, bind)),
            r0,
            rt,
            Some((adjacency, self.config.mask_mode)),
        );
        let ctx_shape = tape.gather_rows(sync.shape, &item.anchors.region_ids);
        x0 = self.arch.film_shape.forward(tape, bind, x0, ctx_shape);
        if let (Some(x_motion), Some(r_motion)) = (xt, sync.motion) {
            let ctx_motion = tape.gather_rows(r_motion, &item.anchors.region_ids);
            xt = Some(self.arch.film_motion.forward(tape, bind, x_motion, ctx_motion));
        }

        for layer in &self.arch.trunk {
            x0 = layer.self_attn.forward(tape, bind, x0);
            let s = sync_attention(tape, Some((&layer.sync, bind)), x0, xt, None);
            x0 = s.shape;
            if let Some(m) = s.motion {
                xt = Some(m);
            }
        }
        Ok(EncoderOutput {
            x0,
            xt,
            injection_routing: sync.routing,
        })
    }

    fn posterior_head(&self, tape: &mut Tape, bind: &Binding, x0: Var, xt: Var) -> GaussianVars {
        let p0 = tape.mean_rows(x0);
        let pt = tape.mean_rows(xt);
        let cat = tape.concat_cols(p0, pt);
        let h = self.arch.post_l1.forward(tape, bind, cat);
        let h = tape.silu(h);
        let out = self.arch.post_l2.forward(tape, bind, h);
        let latent = self.config.latent_dim;
        let mean = tape.slice_cols(out, 0, latent);
        let raw = tape.slice_cols(out, latent, 2 * latent);
        let log_variance = tape.clamp(raw, losses::LOG_VAR_MIN, losses::LOG_VAR_MAX);
        GaussianVars { mean, log_variance }
    }

    /// MoE prior on the tape: pooled shape embedding, cosine gates against
    /// the (constant) prototype bank, parameter-space expert combination.
    fn prior_head(&self, tape: &mut Tape, bind: &Binding, x0: Var) -> Result<PriorVars> {
        let e_s = tape.mean_rows(x0);
        {
            let v = tape.value(e_s);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(RepcmError::ZeroNorm("shape embedding e_s".into()));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(RepcmError::NonFinite("shape embedding e_s".into()));
            }
        }
        let mut protos_hat = self.prototypes.clone();
        for (e, mut row) in protos_hat.rows_mut().into_iter().enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(RepcmError::ZeroNorm(format!("prototype {e}")));
            }
            row.mapv_inplace(|v| v / n);
        }
        let es_hat = tape.l2_normalize_rows(e_s);
        let protos_t = tape.constant(protos_hat.t().to_owned());
        let sims = tape.matmul(es_hat, protos_t);
        let gates = tape.softmax_rows(sims);

        let latent = self.config.latent_dim;
        let mut means = Vec::with_capacity(self.config.experts);
        let mut vars = Vec::with_capacity(self.config.experts);
        for head in &self.arch.expert_heads {
            let h = head.l1.forward(tape, bind, e_s);
            let h = tape.silu(h);
            let out = head.l2.forward(tape, bind, h);
            let mean = tape.slice_cols(out, 0, latent);
            let raw = tape.slice_cols(out, latent, 2 * latent);
            let lv = tape.clamp(raw, losses::LOG_VAR_MIN, losses::LOG_VAR_MAX);
            let var = tape.exp(lv);
            means.push(mean);
            vars.push(var);
        }
        let mean_mat = tape.concat_rows(&means); // E x latent
        let var_mat = tape.concat_rows(&vars);
        let mu_p = tape.matmul(gates, mean_mat); // 1 x latent
        let var_p = tape.matmul(gates, var_mat);
        let log_variance = tape.ln(var_p);
        Ok(PriorVars {
            gaussian: GaussianVars {
                mean: mu_p,
                log_variance,
            },
            gates,
            e_s,
        })
    }

    /// Decoder: latent projected onto anchor tokens (with positional
    /// content), SyncAttention refinement, dense write-back, trajectory
    /// head. Returns N x 3T in normalized units.
    fn decode_graph(&self, tape: &mut Tape, bind: &Binding, z: Var, item: &PreparedSubject) -> Var {
        let anchor_feats = tape.constant(item.anchor_pos_feats.clone());
        let pe_anchor_shape = self.arch.pe_shape.project_features(tape, bind, anchor_feats);
        let anchor_feats2 = tape.constant(item.anchor_pos_feats.clone());
        let pe_anchor_motion = self.arch.dec_pe_motion.project_features(tape, bind, anchor_feats2);
        let z_shape = self.arch.dec_z_shape.forward(tape, bind, z);
        let z_motion = self.arch.dec_z_motion.forward(tape, bind, z);
        let mut x0 = tape.add_row(pe_anchor_shape, z_shape);
        let mut xt = tape.add_row(pe_anchor_motion, z_motion);
        for layer in &self.arch.dec_layers {
            let s = sync_attention(tape, Some((layer, bind)), x0, Some(xt), None);
            x0 = s.shape;
            xt = s.motion.expect("motion stream present in decoder");
        }
        let query_feats = tape.constant(item.vertex_pos_feats.clone());
        let queries = self.arch.pe_shape.project_features(tape, bind, query_feats);
        let keys_t = tape.transpose(x0);
        let raw = tape.matmul(queries, keys_t);
        let dk = self.config.channels as f64;
        let logits = tape.scale(raw, 1.0 / dk.sqrt());
        let writeback = tape.softmax_rows(logits); // N x K, rows sum to 1
        let dense = tape.matmul(writeback, xt); // N x C
        self.arch.traj_head.forward(tape, bind, dense) // N x 3T
    }
}

/// Loss values of one forward pass (per-item, not batch-scaled).
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub rec: f64,
    pub kl: f64,
    pub total: f64,
}

/// Side information the trainer consumes per item.
pub struct ForwardArtifacts {
    pub loss: LossParts,
    pub e_s: Array1<f64>,
    pub gates: Array1<f64>,
}

impl RepcmModel {
    fn training_graph(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        item: &PreparedSubject,
        adjacency: &Array2<f64>,
        noise: &Array1<f64>,
        beta: f64,
    ) -> Result<(Var, Var, Var, PriorVars)> {
        let target = item
            .target_traj
            .as_ref()
            .ok_or_else(|| RepcmError::EmptyInput(format!("training targets for {}", item.subject_id)))?;
        let enc = self.encode_streams(tape, bind, item, adjacency)?;
        let xt = enc
            .xt
            .ok_or_else(|| RepcmError::EmptyInput(format!("motion stream for {}", item.subject_id)))?;
        let q = self.posterior_head(tape, bind, enc.x0, xt);
        let prior = self.prior_head(tape, bind, enc.x0)?;

        // z = mu_q + exp(0.5 log_var_q) * noise
        let noise_row = tape.constant(noise.clone().insert_axis(Axis(0)));
        let half_lv = tape.scale(q.log_variance, 0.5);
        let std = tape.exp(half_lv);
        let scaled_noise = tape.mul(std, noise_row);
        let z = tape.add(q.mean, scaled_noise);

        let traj = self.decode_graph(tape, bind, z, item);

        // MSE over T*N squared vertex errors, reported in mm^2 (the graph
        // runs in normalized units; the scale factor restores mm)
        let target_var = tape.constant(target.clone());
        let diff = tape.sub(traj, target_var);
        let sq = tape.mul(diff, diff);
        let sum = tape.sum_all(sq);
        let n = target.nrows();
        let s = self.config.normalization_scale;
        let rec = tape.scale(sum, s * s / (self.config.frames * n) as f64);

        // closed-form KL(q || p), summed over latent dims
        let kl = {
            let ql = q.log_variance;
            let pl = prior.gaussian.log_variance;
            let dl = tape.sub(ql, pl);
            let term1 = tape.exp(dl);
            let md = tape.sub(prior.gaussian.mean, q.mean);
            let md2 = tape.mul(md, md);
            let neg_pl = tape.scale(pl, -1.0);
            let inv_pv = tape.exp(neg_pl);
            let term2 = tape.mul(md2, inv_pv);
            let t12 = tape.add(term1, term2);
            let t123 = tape.add(t12, pl);
            let t1234 = tape.sub(t123, ql);
            let shifted = tape.add_scalar(t1234, -1.0);
            let summed = tape.sum_all(shifted);
            tape.scale(summed, 0.5)
        };
        let weighted_kl = tape.scale(kl, beta);
        let total = tape.add(rec, weighted_kl);
        Ok((rec, kl, total, prior))
    }

    /// One training forward+backward. Returns the per-item losses, MoE side
    /// info, and gradients aligned with the parameter set (scaled by
    /// `grad_scale`, typically 1/batch).
    pub fn loss_and_grads(
        &self,
        item: &PreparedSubject,
        adjacency: &Array2<f64>,
        noise: &Array1<f64>,
        beta: f64,
        grad_scale: f64,
    ) -> Result<(ForwardArtifacts, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape);
        let (rec, kl, total, prior) = self.training_graph(&mut tape, &bind, item, adjacency, noise, beta)?;
        let scaled = tape.scale(total, grad_scale);
        let grads = tape.backward(scaled);
        let grad_vec: Vec<Array2<f64>> = (0..self.params.len())
            .map(|i| grads.get(bind.var_at(i), &tape))
            .collect();
        let artifacts = ForwardArtifacts {
            loss: LossParts {
                rec: tape.value(rec)[[0, 0]],
                kl: tape.value(kl)[[0, 0]],
                total: tape.value(total)[[0, 0]],
            },
            e_s: tape.value(prior.e_s).row(0).to_owned(),
            gates: tape.value(prior.gates).row(0).to_owned(),
        };
        Ok((artifacts, grad_vec))
    }

    /// Forward-only training loss (validation).
    pub fn loss_only(
        &self,
        item: &PreparedSubject,
        adjacency: &Array2<f64>,
        noise: &Array1<f64>,
        beta: f64,
    ) -> Result<ForwardArtifacts> {
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let (rec, kl, total, prior) = self.training_graph(&mut tape, &bind, item, adjacency, noise, beta)?;
        Ok(ForwardArtifacts {
            loss: LossParts {
                rec: tape.value(rec)[[0, 0]],
                kl: tape.value(kl)[[0, 0]],
                total: tape.value(total)[[0, 0]],
            },
            e_s: tape.value(prior.e_s).row(0).to_owned(),
            gates: tape.value(prior.gates).row(0).to_owned(),
        })
    }

    /// Infer the motion posterior q(z | X_{0:T-1}) for a complete sequence.
    pub fn encode_posterior(&self, seq: &MeshSequence, partition: &RegionPartition) -> Result<GaussianParams> {
        let item = self.prepare_training_subject(seq, partition)?;
        let adjacency = partition.adjacency_f64();
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let enc = self.encode_streams(&mut tape, &bind, &item, &adjacency)?;
        let xt = enc.xt.expect("training subject has a motion stream");
        let q = self.posterior_head(&mut tape, &bind, enc.x0, xt);
        GaussianParams::new(
            tape.value(q.mean).row(0).to_owned(),
            tape.value(q.log_variance).row(0).to_owned(),
        )
    }

    /// Decode a latent into ED-relative trajectories (mm). Frame 0 is not
    /// structurally forced to zero; the reconstruction loss drives it there.
    pub fn decode_trajectories(
        &self,
        z: &Array1<f64>,
        ed_frame: &ArrayView2<'_, f64>,
        partition: &RegionPartition,
    ) -> Result<TrajectoryField> {
        if z.len() != self.config.latent_dim {
            return Err(RepcmError::shape(
                format!("latent of dim {}", self.config.latent_dim),
                format!("{}", z.len()),
            ));
        }
        let item = self.prepare_completion_input(ed_frame, partition, "decode", Phenotype::Nor)?;
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone().insert_axis(Axis(0)));
        let traj = self.decode_graph(&mut tape, &bind, zv, &item);
        let rows = tape.value(traj).mapv(|v| v * self.config.normalization_scale);
        TrajectoryField::from_flat_rows(&rows.view())
    }

    /// Complete a full sequence from a single ED frame: shape-stream
    /// encoding, MoE prior, z = mu_p (+ sigma_p * noise when sampling),
    /// decode, compose. Deterministic when `noise` is None.
    pub fn complete(
        &self,
        ed_frame: &ArrayView2<'_, f64>,
        partition: &RegionPartition,
        noise: Option<&Array1<f64>>,
    ) -> Result<Completion> {
        let item = self.prepare_completion_input(ed_frame, partition, "complete", Phenotype::Nor)?;
        let adjacency = partition.adjacency_f64();
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let enc = self.encode_streams(&mut tape, &bind, &item, &adjacency)?;
        let prior = self.prior_head(&mut tape, &bind, enc.x0)?;
        let prior_params = GaussianParams::new(
            tape.value(prior.gaussian.mean).row(0).to_owned(),
            tape.value(prior.gaussian.log_variance).row(0).to_owned(),
        )?;
        let z_value = match noise {
            Some(eps) => losses::reparameterize(&prior_params, &eps.view())?,
            None => prior_params.mean.clone(),
        };
        let zv = tape.constant(z_value.clone().insert_axis(Axis(0)));
        let traj = self.decode_graph(&mut tape, &bind, zv, &item);
        let rows = tape.value(traj).mapv(|v| v * self.config.normalization_scale);
        let field = TrajectoryField::from_flat_rows(&rows.view())?;
        let frames = compose_frames(ed_frame, &field)?;
        Ok(Completion {
            frames,
            gates: tape.value(prior.gates).row(0).to_owned(),
            prior: prior_params,
            latent: z_value,
        })
    }

    /// Pooled shape embedding and gate weights for one ED frame (routing
    /// analysis without a full decode).
    pub fn shape_gates(&self, ed_frame: &ArrayView2<'_, f64>, partition: &RegionPartition) -> Result<Array1<f64>> {
        let item = self.prepare_completion_input(ed_frame, partition, "gates", Phenotype::Nor)?;
        let adjacency = partition.adjacency_f64();
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let enc = self.encode_streams(&mut tape, &bind, &item, &adjacency)?;
        let prior = self.prior_head(&mut tape, &bind, enc.x0)?;
        Ok(tape.value(prior.gates).row(0).to_owned())
    }

    /// Region-level routing matrix of the injection block for one input
    /// (diagnostics; used by mask-correctness checks on trained models).
    pub fn injection_routing(
        &self,
        ed_frame: &ArrayView2<'_, f64>,
        partition: &RegionPartition,
    ) -> Result<Array2<f64>> {
        let item = self.prepare_completion_input(ed_frame, partition, "routing", Phenotype::Nor)?;
        let adjacency = partition.adjacency_f64();
        let mut tape = Tape::new();
        let bind = self.params.bind_frozen(&mut tape);
        let enc = self.encode_streams(&mut tape, &bind, &item, &adjacency)?;
        Ok(tape.value(enc.injection_routing).clone())
    }
}

/// Result of single-frame completion.
pub struct Completion {
    /// T x N x 3 completed frames in mm.
    pub frames: Array3<f64>,
    pub gates: Array1<f64>,
    pub prior: GaussianParams,
    pub latent: Array1<f64>,
}

/// Checkpoint sidecar: the full model configuration plus the SHA-256 of the
/// partition file the model was trained against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub partition_sha256: String,
}

pub const CHECKPOINT_TENSORS: &str = "model.bin";
pub const CHECKPOINT_META: &str = "config.json";
const PROTOTYPE_TENSOR: &str = "buffers/prototypes";

impl RepcmModel {
    pub fn save_checkpoint(&self, dir: &Path, partition_sha256: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries: Vec<(String, &Array2<f64>)> = self
            .params
            .iter()
            .map(|(name, value)| (name.to_string(), value))
            .collect();
        entries.push((PROTOTYPE_TENSOR.to_string(), &self.prototypes));
        io::write_tensor_archive(&dir.join(CHECKPOINT_TENSORS), &entries)?;
        io::write_json(
            &dir.join(CHECKPOINT_META),
            &CheckpointMeta {
                model: self.config.clone(),
                partition_sha256: partition_sha256.to_string(),
            },
        )
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(RepcmModel, CheckpointMeta)> {
        let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(dir.join(CHECKPOINT_META))?)?;
        let mut model = RepcmModel::new(meta.model.clone(), 0)?;
        let entries = io::read_tensor_archive(&dir.join(CHECKPOINT_TENSORS))?;
        let mut by_name: std::collections::BTreeMap<String, Array2<f64>> = entries.into_iter().collect();
        for i in 0..model.params.len() {
            let name = model.params.name(i).to_string();
            let value = by_name.remove(&name).ok_or_else(|| RepcmError::MalformedFile {
                path: dir.join(CHECKPOINT_TENSORS).display().to_string(),
                reason: format!("missing tensor {name}"),
            })?;
            if value.dim() != model.params.value(i).dim() {
                return Err(RepcmError::shape(
                    format!("{name} of shape {:?}", model.params.value(i).dim()),
                    format!("{:?}", value.dim()),
                ));
            }
            *model.params.value_mut(i) = value;
        }
        let protos = by_name.remove(PROTOTYPE_TENSOR).ok_or_else(|| RepcmError::MalformedFile {
            path: dir.join(CHECKPOINT_TENSORS).display().to_string(),
            reason: format!("missing tensor {PROTOTYPE_TENSOR}"),
        })?;
        model.prototypes = protos;
        Ok((model, meta))
    }
}
