//! Symmetric image-to-image InfoNCE with label smoothing.
//!
//! Row `i` of the logit matrix is query `i` scored against every gallery
//! image in the batch; the diagonal holds the positives. The loss averages
//! the row-wise (query → gallery) and column-wise (gallery → query) smoothed
//! cross-entropies.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::params::Grads;
use crate::encoder::{l2_normalize_backward, EmbeddingMatrix, VisionEncoder, DEFAULT_LOGIT_SCALE};
use crate::error::{ReidError, Result};
use crate::par;
use crate::preprocess::NormalizedImage;

/// Images per gradient-accumulation chunk. Fixed so the floating-point
/// reduction order does not depend on the thread count.
pub const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub label_smoothing: f64,
    /// Initial inverse temperature. `None` takes the encoder's own value.
    pub logit_scale: Option<f64>,
    pub learn_logit_scale: bool,
    pub logit_scale_max: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            label_smoothing: 0.1,
            logit_scale: None,
            learn_logit_scale: true,
            logit_scale_max: 100.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(ReidError::Config("label_smoothing must be in [0,1)".into()));
        }
        if let Some(s) = self.logit_scale {
            if !(s > 0.0) {
                return Err(ReidError::Config("logit_scale must be positive".into()));
            }
        }
        if !(self.logit_scale_max > 0.0) {
            return Err(ReidError::Config("logit_scale_max must be positive".into()));
        }
        Ok(())
    }

    pub fn initial_scale(&self, encoder_scale: f64) -> f64 {
        let s = self.logit_scale.unwrap_or(if encoder_scale > 0.0 {
            encoder_scale
        } else {
            DEFAULT_LOGIT_SCALE
        });
        s.min(self.logit_scale_max)
    }
}

/// `values[i][j] = scale · ⟨q_i, g_j⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    pub values: Array2<f64>,
    pub scale: f64,
}

impl LogitMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Summary used in diagnostics and the metrics log.
    pub fn stats(&self) -> LogitStats {
        let diag: Vec<f64> = self.values.diag().to_vec();
        let n = self.values.nrows();
        let off_sum = self.values.sum() - diag.iter().sum::<f64>();
        let off_count = (n * n).saturating_sub(n).max(1);
        LogitStats {
            scale: self.scale,
            mean_positive: diag.iter().sum::<f64>() / diag.len().max(1) as f64,
            mean_negative: off_sum / off_count as f64,
            max: self.values.fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
            min: self.values.fold(f64::INFINITY, |a, &b| a.min(b)),
            finite: self.values.iter().all(|v| v.is_finite()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitStats {
    pub scale: f64,
    pub mean_positive: f64,
    pub mean_negative: f64,
    pub max: f64,
    pub min: f64,
    pub finite: bool,
}

pub fn similarity_logits(q: &EmbeddingMatrix, g: &EmbeddingMatrix, scale: f64) -> Result<LogitMatrix> {
    if q.vectors.dim() != g.vectors.dim() {
        return Err(ReidError::Shape(format!(
            "query embeddings {:?} vs gallery embeddings {:?}",
            q.vectors.dim(),
            g.vectors.dim()
        )));
    }
    for m in [q, g] {
        if let Some(i) = m.vectors.rows().into_iter().position(|r| r.dot(&r) == 0.0) {
            return Err(ReidError::Numerical(format!("zero-norm embedding row {i} ({})", m.ids[i])));
        }
    }
    Ok(LogitMatrix {
        values: q.vectors.dot(&g.vectors.t()) * scale,
        scale,
    })
}

fn check_square(l: &Array2<f64>) -> Result<usize> {
    let (r, c) = l.dim();
    if r != c {
        return Err(ReidError::Shape(format!("logit matrix must be square, got {r}x{c}")));
    }
    if r < 2 {
        return Err(ReidError::Invalid("InfoNCE needs n ≥ 2".into()));
    }
    Ok(r)
}

/// Mean smoothed cross-entropy over rows, with the gradient w.r.t. `logits`.
fn smoothed_ce_rows(logits: &Array2<f64>, eps: f64) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    let off = eps / n as f64;
    let on = 1.0 - eps + off;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (j, &v) in row.iter().enumerate() {
            let t = if i == j { on } else { off };
            let logp = v - lse;
            loss -= t * logp;
            grad[[i, j]] = (logp.exp() - t) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Loss and `∂loss/∂logits`.
pub fn info_nce_symmetric_with_grad(l: &LogitMatrix, eps: f64) -> Result<(f64, Array2<f64>)> {
    check_square(&l.values)?;
    if !(0.0..1.0).contains(&eps) {
        return Err(ReidError::Invalid("label smoothing must be in [0,1)".into()));
    }
    let (row_loss, row_grad) = smoothed_ce_rows(&l.values, eps);
    let t = l.values.t().to_owned();
    let (col_loss, col_grad) = smoothed_ce_rows(&t, eps);
    let grad = (row_grad + col_grad.t()) * 0.5;
    Ok((0.5 * (row_loss + col_loss), grad))
}

pub fn info_nce_symmetric(l: &LogitMatrix, eps: f64) -> Result<f64> {
    Ok(info_nce_symmetric_with_grad(l, eps)?.0)
}

/// Lowest attainable loss: the entropy of the smoothed target.
pub fn smoothing_floor(n: usize, eps: f64) -> f64 {
    let off = eps / n as f64;
    let on = 1.0 - eps + off;
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    h(on) + (n - 1) as f64 * h(off)
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub logits: LogitMatrix,
    pub query: EmbeddingMatrix,
    pub gallery: EmbeddingMatrix,
    /// Encoder parameter gradients, when requested.
    pub grads: Option<Grads>,
    /// `∂loss/∂log(scale)`.
    pub d_log_scale: f64,
}

/// Encodes the `n` query and `n` gallery images of a batch in one pass of
/// `2n` images, computes the symmetric loss, and optionally backpropagates
/// into the encoder.
pub fn dual_view_forward(
    enc: &VisionEncoder,
    queries: &[NormalizedImage],
    gallery: &[NormalizedImage],
    scale: f64,
    eps: f64,
    with_grads: bool,
) -> Result<StepOutput> {
    let n = queries.len();
    if gallery.len() != n {
        return Err(ReidError::Shape(format!("{n} queries but {} gallery images", gallery.len())));
    }
    let all: Vec<&NormalizedImage> = queries.iter().chain(gallery).collect();
    let raw = par::try_map_slice(&all, |x| enc.embed_raw(x))?;

    let d = enc.embedding_dim();
    let mut units = Array2::zeros((2 * n, d));
    let mut norms = Array1::zeros(2 * n);
    for (i, r) in raw.iter().enumerate() {
        let mut v = r.clone();
        norms[i] = crate::encoder::l2_normalize(&mut v)?;
        units.row_mut(i).assign(&Array1::from(v));
    }
    let ids = |prefix: &str| (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
    let q = EmbeddingMatrix::new(ids("q"), units.slice(ndarray::s![..n, ..]).to_owned())?;
    let g = EmbeddingMatrix::new(ids("g"), units.slice(ndarray::s![n.., ..]).to_owned())?;
    let logits = similarity_logits(&q, &g, scale)?;
    let (loss, d_logits) = info_nce_symmetric_with_grad(&logits, eps)?;
    let d_log_scale = (&d_logits * &logits.values).sum();

    let grads = if with_grads {
        let d_q = d_logits.dot(&g.vectors) * scale;
        let d_g = d_logits.t().dot(&q.vectors) * scale;
        let d_units = ndarray::concatenate(Axis(0), &[d_q.view(), d_g.view()]).expect("same width");
        let d_raw: Vec<Vec<f64>> = (0..2 * n)
            .map(|i| l2_normalize_backward(units.row(i), norms[i], d_units.row(i)))
            .collect();
        Some(accumulate_grads(enc, &all, &d_raw)?)
    } else {
        None
    };
    Ok(StepOutput {
        loss,
        logits,
        query: q,
        gallery: g,
        grads,
        d_log_scale,
    })
}

/// Sums per-image parameter gradients in fixed-size chunks, in order.
pub fn accumulate_grads(enc: &VisionEncoder, images: &[&NormalizedImage], d_raw: &[Vec<f64>]) -> Result<Grads> {
    let chunks: Vec<usize> = (0..images.len().div_ceil(GRAD_CHUNK)).collect();
    let partial = par::try_map_slice(&chunks, |&c| -> Result<Grads> {
        let mut g = enc.params().zeros_like();
        let end = ((c + 1) * GRAD_CHUNK).min(images.len());
        for i in c * GRAD_CHUNK..end {
            enc.backward_raw(images[i], &d_raw[i], &mut g)?;
        }
        Ok(g)
    })?;
    let mut total = enc.params().zeros_like();
    for g in &partial {
        total.add_assign(g);
    }
    Ok(total)
}
