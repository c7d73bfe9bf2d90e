//! Building blocks of the completion model: positional encodings, linear
//! projections, self-attention, synchronized (optionally masked) two-stream
//! attention, FiLM modulation and region pooling.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{RepcmError, Result};

/// How the adjacency mask enters the region-level softmax.
///
/// `Additive` sets masked logits to -inf, which blocks non-adjacent flow
/// exactly. `LiteralHadamard` multiplies logits by the mask inside the
/// softmax; a zeroed logit still contributes exp(0) = 1, so non-adjacent
/// regions keep a small weight. The literal form is kept for fidelity
/// experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MaskMode {
    #[serde(rename = "ADDITIVE")]
    #[default]
    Additive,
    #[serde(rename = "LITERAL_HADAMARD")]
    LiteralHadamard,
}

/// Named parameter store. Parameters live here between steps; each forward
/// pass binds them onto a fresh tape.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Array2<f64> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Array2<f64> {
        &mut self.values[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Bind every parameter onto the tape as a gradient leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Bind every parameter as a constant (inference: no gradient tracking).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Per-tape handles for the whole parameter set.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Bound var by raw parameter index (parameter order is creation order).
    pub fn var_at(&self, index: usize) -> Var {
        self.vars[index]
    }
}

pub enum Init {
    Glorot,
    Zero,
}

pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| (rng.random::<f64>() * 2.0 - 1.0) * a)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let w_value = match init {
            Init::Glorot => glorot(rng, fan_in, fan_out),
            Init::Zero => Array2::zeros((fan_in, fan_out)),
        };
        let w = ps.add(format!("{name}/w"), w_value);
        let b = bias.then(|| ps.add(format!("{name}/b"), Array2::zeros((1, fan_out))));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let y = tape.matmul(x, bind.var(self.w));
        match self.b {
            Some(b) => tape.add_row(y, bind.var(b)),
            None => y,
        }
    }
}

/// Sinusoidal expansion: every input scalar becomes sin/cos pairs at
/// frequencies 2^0 .. 2^(levels-1). Layout is input-dim major:
/// [d0: sin_0, cos_0, sin_1, cos_1, ...][d1: ...].
pub fn sinusoidal_features(coords: &ArrayView2<'_, f64>, levels: usize) -> Array2<f64> {
    let (m, d) = coords.dim();
    let mut out = Array2::zeros((m, d * 2 * levels));
    for r in 0..m {
        for c in 0..d {
            let x = coords[[r, c]];
            for l in 0..levels {
                let freq = (1u64 << l) as f64;
                out[[r, c * 2 * levels + 2 * l]] = (freq * x).sin();
                out[[r, c * 2 * levels + 2 * l + 1]] = (freq * x).cos();
            }
        }
    }
    out
}

/// Sinusoidal frequency encoding followed by a learned affine projection to
/// the channel width. Separate instances (with independent parameters) are
/// used for the shape stream and the flattened-trajectory motion stream.
#[derive(Debug, Clone)]
pub struct PositionalEncoder {
    pub levels: usize,
    pub input_dim: usize,
    pub proj: Linear,
}

impl PositionalEncoder {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        input_dim: usize,
        levels: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> PositionalEncoder {
        let proj = Linear::new(ps, name, input_dim * 2 * levels, channels, true, Init::Glorot, rng);
        PositionalEncoder {
            levels,
            input_dim,
            proj,
        }
    }

    /// Expand raw coordinates outside the graph, then project on-tape.
    pub fn encode_coords(&self, tape: &mut Tape, bind: &Binding, coords: &ArrayView2<'_, f64>) -> Var {
        let feats = tape.constant(sinusoidal_features(coords, self.levels));
        self.proj.forward(tape, bind, feats)
    }

    /// Project pre-expanded features (used when the expansion is cached).
    pub fn project_features(&self, tape: &mut Tape, bind: &Binding, features: Var) -> Var {
        self.proj.forward(tape, bind, features)
    }
}

/// Query/key/value projections of one synchronized attention block. Queries
/// and keys always come from the shape stream; each stream has its own value
/// projection but shares the routing matrix.
#[derive(Debug, Clone)]
pub struct SyncProjections {
    pub q: Linear,
    pub k: Linear,
    pub v_shape: Linear,
    pub v_motion: Linear,
}

impl SyncProjections {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> SyncProjections {
        SyncProjections {
            q: Linear::new(ps, &format!("{name}/q"), channels, channels, false, Init::Glorot, rng),
            k: Linear::new(ps, &format!("{name}/k"), channels, channels, false, Init::Glorot, rng),
            v_shape: Linear::new(ps, &format!("{name}/v0"), channels, channels, false, Init::Glorot, rng),
            v_motion: Linear::new(ps, &format!("{name}/vt"), channels, channels, false, Init::Glorot, rng),
        }
    }
}

pub struct SyncAttentionOutput {
    pub shape: Var,
    pub motion: Option<Var>,
    /// The routing matrix W shared by both streams.
    pub routing: Var,
}

/// Synchronized two-stream attention with residuals:
/// one routing matrix W = softmax(Q(r0) K(r0)^T / sqrt(d_k)) computed from
/// the shape stream, applied to both streams:
/// shape' = W V0(r0) + r0, motion' = W Vt(rt) + rt.
///
/// With `proj = None` the projections are the identity (unit-test mode).
/// With a mask, `Additive` blocks non-adjacent pairs exactly while
/// `LiteralHadamard` multiplies logits by the mask inside the softmax.
pub fn sync_attention(
    tape: &mut Tape,
    proj: Option<(&SyncProjections, &Binding)>,
    r0: Var,
    rt: Option<Var>,
    mask: Option<(&Array2<f64>, MaskMode)>,
) -> SyncAttentionOutput {
    let (q, k, v0, vt) = match proj {
        Some((p, bind)) => (
            p.q.forward(tape, bind, r0),
            p.k.forward(tape, bind, r0),
            p.v_shape.forward(tape, bind, r0),
            rt.map(|m| p.v_motion.forward(tape, bind, m)),
        ),
        None => (r0, r0, r0, rt),
    };
    let dk = tape.value(q).ncols() as f64;
    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt);
    let logits = tape.scale(raw, 1.0 / dk.sqrt());
    let routing = match mask {
        None => tape.softmax_rows(logits),
        Some((a, MaskMode::Additive)) => tape.masked_softmax_rows(logits, a),
        Some((a, MaskMode::LiteralHadamard)) => {
            let ac = tape.constant(a.clone());
            let masked = tape.mul(logits, ac);
            tape.softmax_rows(masked)
        }
    };
    let shape = {
        let upd = tape.matmul(routing, v0);
        tape.add(upd, r0)
    };
    let motion = match (rt, vt) {
        (Some(m), Some(v)) => {
            let upd = tape.matmul(routing, v);
            Some(tape.add(upd, m))
        }
        _ => None,
    };
    SyncAttentionOutput {
        shape,
        motion,
        routing,
    }
}

/// Region-level masked SyncAttention with identity projections: the exact
/// update of both region-token streams under the adjacency mask.
pub fn masked_sync_attention(
    tape: &mut Tape,
    r0: Var,
    rt: Var,
    adjacency: &Array2<f64>,
    mode: MaskMode,
) -> Result<SyncAttentionOutput> {
    let r = tape.value(r0).nrows();
    if adjacency.dim() != (r, r) {
        return Err(RepcmError::shape(format!("{r} x {r} adjacency"), format!("{:?}", adjacency.dim())));
    }
    Ok(sync_attention(tape, None, r0, Some(rt), Some((adjacency, mode))))
}

/// Plain self-attention with residual on a single stream.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> SelfAttention {
        SelfAttention {
            q: Linear::new(ps, &format!("{name}/q"), channels, channels, false, Init::Glorot, rng),
            k: Linear::new(ps, &format!("{name}/k"), channels, channels, false, Init::Glorot, rng),
            v: Linear::new(ps, &format!("{name}/v"), channels, channels, false, Init::Glorot, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let q = self.q.forward(tape, bind, x);
        let k = self.k.forward(tape, bind, x);
        let v = self.v.forward(tape, bind, x);
        let dk = tape.value(q).ncols() as f64;
        let kt = tape.transpose(k);
        let raw = tape.matmul(q, kt);
        let logits = tape.scale(raw, 1.0 / dk.sqrt());
        let w = tape.softmax_rows(logits);
        let upd = tape.matmul(w, v);
        tape.add(upd, x)
    }
}

/// FiLM residual modulation: x + gamma(ctx) * LayerNorm(x) + beta(ctx).
/// Both heads are zero-initialized, so the block starts as the identity.
#[derive(Debug, Clone)]
pub struct Film {
    pub gamma: Linear,
    pub beta: Linear,
}

impl Film {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Film {
        Film {
            gamma: Linear::new(ps, &format!("{name}/gamma"), channels, channels, true, Init::Zero, rng),
            beta: Linear::new(ps, &format!("{name}/beta"), channels, channels, true, Init::Zero, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var, context: Var) -> Var {
        let g = self.gamma.forward(tape, bind, context);
        let b = self.beta.forward(tape, bind, context);
        let normed = tape.layer_norm_rows(x);
        let scaled = tape.mul(g, normed);
        let with_scale = tape.add(x, scaled);
        tape.add(with_scale, b)
    }
}

/// Mean-pool anchor tokens into region tokens. Every region must own at
/// least one anchor; the error names the first region that does not.
pub fn pool_region_tokens(
    tape: &mut Tape,
    anchors_shape: Var,
    anchors_motion: Option<Var>,
    region_ids: &[usize],
    regions: usize,
) -> Result<(Var, Option<Var>)> {
    let mut counts = vec![0usize; regions];
    for &r in region_ids {
        if r >= regions {
            return Err(RepcmError::InvalidArgument(format!(
                "anchor region id {r} >= R={regions}"
            )));
        }
        counts[r] += 1;
    }
    if let Some(region) = counts.iter().position(|&c| c == 0) {
        return Err(RepcmError::EmptyRegion {
            region,
            what: "anchors",
        });
    }
    let shape = tape.segment_mean_rows(anchors_shape, region_ids, regions);
    let motion = anchors_motion.map(|m| tape.segment_mean_rows(m, region_ids, regions));
    Ok((shape, motion))
}
