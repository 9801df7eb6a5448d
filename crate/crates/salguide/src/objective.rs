//! Training losses: binary cross-entropy, the explanation loss, and their
//! weighted sum.
//!
//! The explanation loss penalizes retained saliency mass falling outside
//! the annotation mask. Training uses the value-weighted soft variant
//! (the binary indicator is piecewise constant and carries no gradient);
//! metrics use the hard variant.

use std::rc::Rc;

use crate::annotations::Mask;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::explain::{explain_sample, SaliencyMap};
use crate::model::ForwardTrace;
use crate::scores::ScoreKind;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ExpLossMode {
    /// Value-weighted, indicator-stopped: differentiable training signal.
    Soft,
    /// Binary thresholded map: metric-faithful.
    Hard,
}

/// Per-batch loss components. `bce`, `exp`, and `total` stay attached to
/// the graph so the caller can backprop through `total`.
pub struct LossBreakdown {
    pub bce: Tensor,
    /// Unweighted explanation loss (mean over explained samples; 0 if none).
    pub exp: Tensor,
    pub total: Tensor,
    pub alpha: f64,
    pub n_explained: usize,
    pub n_skipped_degenerate: usize,
}

/// Mean binary cross-entropy over the batch, computed via log-sum-exp.
pub fn bce_loss(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            expected: vec![labels.len(), 2],
            got: shape.to_vec(),
        });
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidParameter("labels must be 0 or 1".into()));
    }
    let n = labels.len();
    let v = logits.values();
    let mut shift = Vec::with_capacity(2 * n);
    let mut maxes = Vec::with_capacity(n);
    for i in 0..n {
        let m = v[2 * i].max(v[2 * i + 1]);
        shift.push(m);
        shift.push(m);
        maxes.push(m);
    }
    let shift = Tensor::from_values(&[n, 2], shift)?;
    let maxes = Tensor::from_values(&[n, 1], maxes)?;
    let e = logits.sub(&shift)?.exp();
    let lse = e
        .matmul(&Tensor::ones(&[2, 1]))?
        .ln()
        .add(&maxes)?; // [n,1]
    let zy_idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| 2 * i + y as usize)
        .collect();
    let zy = logits.gather(Rc::new(zy_idx), &[n, 1]);
    Ok(lse.sub(&zy)?.mean())
}

/// L = 1 - sum(S .* M) / sum(S). Degenerate saliency (sum 0) contributes a
/// zero loss and is flagged skipped.
pub fn explanation_loss(
    sal: &SaliencyMap,
    mask: &Mask,
    mode: ExpLossMode,
) -> Result<(Tensor, bool)> {
    if sal.dims != (mask.height, mask.width) {
        return Err(Error::ShapeMismatch {
            op: "explanation_loss",
            expected: vec![mask.height, mask.width],
            got: vec![sal.dims.0, sal.dims.1],
        });
    }
    let s = match mode {
        ExpLossMode::Soft => &sal.masked_soft,
        ExpLossMode::Hard => &sal.binary,
    };
    let denom_value: f64 = s.values().iter().sum();
    if denom_value == 0.0 {
        return Ok((Tensor::scalar(0.0), true));
    }
    let m = Tensor::from_values(&[mask.height, mask.width], mask.grid.clone())?;
    let inside = s.reshape(&[mask.height, mask.width])?.mul(&m)?.sum();
    let ratio = inside.div(&s.sum())?;
    Ok((Tensor::scalar(1.0).sub(&ratio)?, false))
}

/// Batch objective: BCE over all samples, explanation loss averaged over
/// positive annotated non-degenerate samples, combined as bce + alpha*exp.
///
/// When the kind is `PureBce`, when alpha is 0, or when no sample
/// contributes, the total is exactly the BCE tensor.
pub fn batch_objective(
    trace: &ForwardTrace,
    labels: &[u8],
    masks: &[Option<Mask>],
    kind: ScoreKind,
    alpha: f64,
    k_percent: f64,
    stop_weights: bool,
) -> Result<LossBreakdown> {
    if alpha < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "alpha must be nonnegative, got {}",
            alpha
        )));
    }
    if masks.len() != labels.len() {
        return Err(Error::InvalidParameter(
            "masks and labels length mismatch".into(),
        ));
    }
    let bce = bce_loss(&trace.logits, labels)?;

    let mut per_sample: Vec<Tensor> = Vec::new();
    let mut n_skipped_degenerate = 0;
    if kind != ScoreKind::PureBce && alpha > 0.0 {
        for (i, (label, mask)) in labels.iter().zip(masks).enumerate() {
            let Some(mask) = mask else { continue };
            if *label != 1 {
                continue;
            }
            let sal = explain_sample(trace, i, kind, true, k_percent, stop_weights)?;
            if sal.degenerate || sal.disconnected {
                n_skipped_degenerate += 1;
                continue;
            }
            let (loss, skipped) = explanation_loss(&sal, mask, ExpLossMode::Soft)?;
            if skipped {
                n_skipped_degenerate += 1;
            } else {
                per_sample.push(loss);
            }
        }
    }

    let n_explained = per_sample.len();
    let (exp, total) = if n_explained == 0 {
        (Tensor::scalar(0.0), bce.clone())
    } else {
        let mut acc = per_sample[0].clone();
        for l in &per_sample[1..] {
            acc = acc.add(l)?;
        }
        let exp = acc.scale(1.0 / n_explained as f64);
        let total = bce.add(&exp.scale(alpha))?;
        (exp, total)
    };

    Ok(LossBreakdown {
        bce,
        exp,
        total,
        alpha,
        n_explained,
        n_skipped_degenerate,
    })
}
