//! Plain (non-graph) forms of the VAE objective pieces. The training path
//! rebuilds the same math on the autodiff tape; unit tests cross-check the
//! two routes against each other.

use ndarray::{Array1, Array3, ArrayView1};

use crate::error::{RepcmError, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussian over the motion latent. The log-variance is clamped to
/// [-10, 10] on construction, which keeps the KL closed form bounded.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Array1<f64>,
    pub log_variance: Array1<f64>,
}

impl GaussianParams {
    pub fn new(mean: Array1<f64>, log_variance: Array1<f64>) -> Result<GaussianParams> {
        if mean.len() != log_variance.len() {
            return Err(RepcmError::shape(
                format!("log_variance of length {}", mean.len()),
                format!("{}", log_variance.len()),
            ));
        }
        if !mean.iter().chain(log_variance.iter()).all(|v| v.is_finite()) {
            return Err(RepcmError::NonFinite("Gaussian parameters".into()));
        }
        Ok(GaussianParams {
            mean,
            log_variance: log_variance.mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Array1<f64> {
        self.log_variance.mapv(f64::exp)
    }
}

/// z = mean + exp(0.5 * log_variance) * noise.
pub fn reparameterize(params: &GaussianParams, noise: &ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if noise.len() != params.dim() {
        return Err(RepcmError::shape(
            format!("noise of length {}", params.dim()),
            format!("{}", noise.len()),
        ));
    }
    let std = params.log_variance.mapv(|v| (0.5 * v).exp());
    Ok(&params.mean + &(&std * noise))
}

/// Closed-form KL divergence between diagonal Gaussians, summed over
/// dimensions:
/// sum 0.5 * (sq/sp + (mp-mq)^2/sp - 1 + ln sp - ln sq).
pub fn kl_diag_gaussian(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(RepcmError::shape(format!("{}-dim prior", q.dim()), format!("{}", p.dim())));
    }
    let mut kl = 0.0;
    for d in 0..q.dim() {
        let ql = q.log_variance[d];
        let pl = p.log_variance[d];
        if !pl.is_finite() {
            return Err(RepcmError::NonFinite("prior log-variance".into()));
        }
        let diff = p.mean[d] - q.mean[d];
        kl += 0.5 * ((ql - pl).exp() + diff * diff * (-pl).exp() - 1.0 + pl - ql);
    }
    Ok(kl)
}

/// Mean squared vertex error over all frames and vertices (the squared
/// Euclidean norm over the 3 coordinates, averaged over T*N).
pub fn reconstruction_loss(pred_frames: &Array3<f64>, truth_frames: &Array3<f64>) -> Result<f64> {
    if pred_frames.dim() != truth_frames.dim() {
        return Err(RepcmError::shape(
            format!("{:?}", truth_frames.dim()),
            format!("{:?}", pred_frames.dim()),
        ));
    }
    let (t, n, _) = pred_frames.dim();
    let mut acc = 0.0;
    for (a, b) in pred_frames.iter().zip(truth_frames.iter()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / (t * n) as f64)
}

/// rec + beta * kl.
pub fn total_loss(rec: f64, kl: f64, beta: f64) -> f64 {
    rec + beta * kl
}
