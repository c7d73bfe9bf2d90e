//! Phenotype-adaptive mixture-of-experts prior.
//!
//! A global shape embedding (anchor-pooled shape tokens) is routed to E
//! experts by temperature-free softmax over cosine similarities with learned
//! prototypes. Each expert is a two-layer perceptron emitting Gaussian
//! parameters; the final prior combines the experts in parameter space:
//! mu_p = sum w_e mu_e, sigma_p^2 = sum w_e sigma_e^2. Prototypes are not
//! trained by gradient — they follow an exponential moving average of the
//! embeddings hard-assigned to them.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{RepcmError, Result};
use crate::model::losses::{GaussianParams, LOG_VAR_MAX, LOG_VAR_MIN};

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// One expert head: C -> C -> 2 * latent (mean and log-variance halves).
#[derive(Debug, Clone)]
pub struct ExpertHeadParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl ExpertHeadParams {
    /// Evaluate the head on a shape embedding, returning the expert's
    /// Gaussian (log-variance clamped).
    pub fn evaluate(&self, e_s: &ArrayView1<'_, f64>) -> Result<GaussianParams> {
        let x = e_s.insert_axis(Axis(0));
        let mut h = x.dot(&self.w1);
        h += &self.b1;
        h.mapv_inplace(silu);
        let mut out = h.dot(&self.w2);
        out += &self.b2;
        let twol = out.ncols();
        let latent = twol / 2;
        let mean = out.slice(ndarray::s![0, ..latent]).to_owned();
        let logvar = out
            .slice(ndarray::s![0, latent..])
            .mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        GaussianParams::new(mean, logvar)
    }
}

/// Prototype bank + expert heads + the EMA momentum for prototype updates.
#[derive(Debug, Clone)]
pub struct MoEPrior {
    pub prototypes: Array2<f64>,
    pub heads: Vec<ExpertHeadParams>,
    pub momentum: f64,
}

impl MoEPrior {
    pub fn experts(&self) -> usize {
        self.heads.len()
    }

    /// Shape-conditioned prior from anchor shape tokens: pools the tokens
    /// into a global embedding, gates the experts by cosine similarity, and
    /// combines expert Gaussians in parameter space. Returns the prior and
    /// the gate weights.
    pub fn prior(&self, x0_tokens: &ArrayView2<'_, f64>) -> Result<(GaussianParams, Array1<f64>)> {
        if self.heads.is_empty() {
            return Err(RepcmError::EmptyInput("expert heads".into()));
        }
        let e_s = x0_tokens
            .mean_axis(Axis(0))
            .ok_or_else(|| RepcmError::EmptyInput("anchor tokens".into()))?;
        let gates = cosine_gates(&e_s.view(), &self.prototypes.view())?;
        let latent = {
            let first = self.heads[0].evaluate(&e_s.view())?;
            first.dim()
        };
        let mut mean = Array1::<f64>::zeros(latent);
        let mut variance = Array1::<f64>::zeros(latent);
        for (e, head) in self.heads.iter().enumerate() {
            let g = head.evaluate(&e_s.view())?;
            mean += &(g.mean.mapv(|v| v * gates[e]));
            variance += &(g.variance().mapv(|v| v * gates[e]));
        }
        let logvar = variance.mapv(f64::ln);
        Ok((GaussianParams::new(mean, logvar)?, gates))
    }
}

/// Temperature-free softmax over cosine similarities between the (nonzero)
/// embedding and each (nonzero) prototype.
pub fn cosine_gates(e_s: &ArrayView1<'_, f64>, prototypes: &ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let es_norm = e_s.iter().map(|v| v * v).sum::<f64>().sqrt();
    if es_norm == 0.0 {
        return Err(RepcmError::ZeroNorm("shape embedding e_s".into()));
    }
    let experts = prototypes.nrows();
    let mut sims = Array1::<f64>::zeros(experts);
    for e in 0..experts {
        let p = prototypes.row(e);
        let p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if p_norm == 0.0 {
            return Err(RepcmError::ZeroNorm(format!("prototype {e}")));
        }
        sims[e] = e_s.dot(&p) / (es_norm * p_norm);
    }
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w = sims.mapv(|s| (s - max).exp());
    let sum = w.sum();
    w /= sum;
    Ok(w)
}

/// EMA prototype update with hard assignment: each embedding belongs to its
/// argmax-gate expert; each assigned expert moves toward the gate-weighted
/// mean of its embeddings, p_e <- m * p_e + (1 - m) * mean. Experts with no
/// assignments are left unchanged.
pub fn update_prototypes(
    prototypes: &mut Array2<f64>,
    momentum: f64,
    embeddings: &[Array1<f64>],
    gates: &[Array1<f64>],
) {
    debug_assert_eq!(embeddings.len(), gates.len());
    let experts = prototypes.nrows();
    let cols = prototypes.ncols();
    let mut sums = Array2::<f64>::zeros((experts, cols));
    let mut weights = vec![0.0f64; experts];
    for (emb, gate) in embeddings.iter().zip(gates) {
        let mut arg = 0;
        for (e, &g) in gate.iter().enumerate() {
            if g > gate[arg] {
                arg = e;
            }
        }
        let w = gate[arg];
        let mut row = sums.row_mut(arg);
        ndarray::Zip::from(&mut row).and(emb).for_each(|s, &v| *s += w * v);
        weights[arg] += w;
    }
    for e in 0..experts {
        if weights[e] == 0.0 {
            continue;
        }
        for c in 0..cols {
            let mean = sums[[e, c]] / weights[e];
            prototypes[[e, c]] = momentum * prototypes[[e, c]] + (1.0 - momentum) * mean;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head(latent: usize, c: usize, seed: u64) -> ExpertHeadParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ExpertHeadParams {
            w1: Array2::from_shape_fn((c, c), |_| rng.random::<f64>() - 0.5),
            b1: Array2::zeros((1, c)),
            w2: Array2::from_shape_fn((c, 2 * latent), |_| rng.random::<f64>() - 0.5),
            b2: Array2::zeros((1, 2 * latent)),
        }
    }

    #[test]
    fn single_expert_reduces_to_its_output() {
        let c = 4;
        let prior = MoEPrior {
            prototypes: Array2::from_elem((1, c), 0.5),
            heads: vec![head(3, c, 1)],
            momentum: 0.99,
        };
        let tokens = arr2(&[[1.0, 0.0, 0.5, -0.5], [0.0, 1.0, 0.5, 0.5]]);
        let (p, gates) = prior.prior(&tokens.view()).unwrap();
        assert_eq!(gates, arr1(&[1.0]));
        let e_s = arr1(&[0.5, 0.5, 0.5, 0.0]);
        let direct = prior.heads[0].evaluate(&e_s.view()).unwrap();
        assert!(p.mean.iter().zip(direct.mean.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(p
            .log_variance
            .iter()
            .zip(direct.log_variance.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn identical_prototypes_give_uniform_gates() {
        let c = 5;
        let prior = MoEPrior {
            prototypes: Array2::from_elem((3, c), 0.7),
            heads: vec![head(2, c, 1), head(2, c, 2), head(2, c, 3)],
            momentum: 0.99,
        };
        let tokens = arr2(&[[0.2, -0.1, 0.9, 0.4, -0.6]]);
        let (_, gates) = prior.prior(&tokens.view()).unwrap();
        for g in gates.iter() {
            assert!((g - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn two_expert_closed_form_gates() {
        // cosine similarities (1, 0) -> softmax = (e/(e+1), 1/(e+1))
        let e_s = arr1(&[1.0, 0.0]);
        let prototypes = arr2(&[[2.0, 0.0], [0.0, 3.0]]);
        let gates = cosine_gates(&e_s.view(), &prototypes.view()).unwrap();
        let e = std::f64::consts::E;
        assert!((gates[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((gates[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((gates[0] - 0.7311).abs() < 1e-4);
        assert!((gates[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn gates_invariant_to_embedding_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prototypes = Array2::from_shape_fn((4, 6), |_| rng.random::<f64>() - 0.5);
        let e_s = Array1::from_shape_fn(6, |_| rng.random::<f64>() - 0.5);
        let g1 = cosine_gates(&e_s.view(), &prototypes.view()).unwrap();
        for lambda in [0.01, 3.0, 250.0] {
            let scaled = e_s.mapv(|v| v * lambda);
            let g2 = cosine_gates(&scaled.view(), &prototypes.view()).unwrap();
            for (a, b) in g1.iter().zip(g2.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gate_weights_sum_to_one_and_variance_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 6;
        let prior = MoEPrior {
            prototypes: Array2::from_shape_fn((4, c), |_| rng.random::<f64>() - 0.5),
            heads: (0..4).map(|e| head(3, c, 40 + e)).collect(),
            momentum: 0.99,
        };
        let tokens = Array2::from_shape_fn((7, c), |_| rng.random::<f64>() - 0.5);
        let (p, gates) = prior.prior(&tokens.view()).unwrap();
        assert!((gates.sum() - 1.0).abs() < 1e-12);
        assert!(gates.iter().all(|&g| g > 0.0));
        assert!(p.variance().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_norm_embedding_is_error() {
        let prototypes = arr2(&[[1.0, 0.0]]);
        let zero = arr1(&[0.0, 0.0]);
        assert!(matches!(
            cosine_gates(&zero.view(), &prototypes.view()),
            Err(RepcmError::ZeroNorm(_))
        ));
        let zero_proto = arr2(&[[0.0, 0.0]]);
        let e_s = arr1(&[1.0, 0.0]);
        assert!(matches!(
            cosine_gates(&e_s.view(), &zero_proto.view()),
            Err(RepcmError::ZeroNorm(_))
        ));
    }

    #[test]
    fn prototype_update_rules() {
        // m = 1: unchanged
        let mut p = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let before = p.clone();
        update_prototypes(&mut p, 1.0, &[arr1(&[5.0, 5.0])], &[arr1(&[0.9, 0.1])]);
        assert_eq!(p, before);

        // m = 0, single assignment: exact replacement
        let mut p = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        update_prototypes(&mut p, 0.0, &[arr1(&[5.0, 6.0])], &[arr1(&[0.9, 0.1])]);
        assert_eq!(p.row(0).to_owned(), arr1(&[5.0, 6.0]));
        assert_eq!(p.row(1).to_owned(), arr1(&[0.0, 1.0])); // unassigned expert untouched

        // m = 0.9, p = (1, 0), assigned mean (0, 1) -> (0.9, 0.1)
        let mut p = arr2(&[[1.0, 0.0]]);
        update_prototypes(&mut p, 0.9, &[arr1(&[0.0, 1.0])], &[arr1(&[1.0])]);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-12);
        assert!((p[[0, 1]] - 0.1).abs() < 1e-12);
    }
}
