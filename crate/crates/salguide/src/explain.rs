//! Grad-CAM heatmap construction, normalization, and top-k thresholding.
//!
//! Channel weights are the spatial mean of the score gradient with respect
//! to the final convolutional activations; keeping `create_graph` on makes
//! the weights differentiable so the explanation loss can train through
//! this path.

use std::rc::Rc;

use crate::diffcore::{backward, Tensor};
use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::scores::{score, ScoreKind};

pub struct SaliencyMap {
    /// Raw heatmap H, nonnegative (post-ReLU). [h, w]
    pub raw: Tensor,
    /// Min-max normalized map in [0,1]; zeros when degenerate. [h, w]
    pub normalized: Tensor,
    /// Top-k quantile threshold applied to the normalized map.
    pub threshold: f64,
    /// Binary thresholded map (gradient-stopped constant). [h, w]
    pub binary: Tensor,
    /// Normalized values masked by the binary indicator; differentiable
    /// through the values, indicator treated as constant. [h, w]
    pub masked_soft: Tensor,
    /// Flat raw map (max == min): excluded from loss.
    pub degenerate: bool,
    /// Score had no graph path to the activations.
    pub disconnected: bool,
    pub dims: (usize, usize),
}

fn spatial_mean_per_channel(g: &Tensor, c: usize, hw: usize) -> Result<Tensor> {
    let flat = g.reshape(&[c, hw])?;
    let sums = flat.matmul(&Tensor::ones(&[hw, 1]))?;
    sums.scale(1.0 / hw as f64).reshape(&[c])
}

/// Grad-CAM channel weights: spatial mean of ds/dA per channel.
///
/// Returns the weights and a flag set when the score is disconnected from
/// the activations (weights are then zero).
pub fn gradcam_weights(s: &Tensor, activations: &Tensor, create_graph: bool) -> Result<(Tensor, bool)> {
    let shape = activations.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            op: "gradcam_weights",
            msg: format!("need [c,h,w] activations, got {:?}", shape),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let gmap = backward(s, std::slice::from_ref(activations), create_graph)?;
    let disconnected = gmap.is_disconnected(activations);
    let weights = spatial_mean_per_channel(gmap.get(activations), c, h * w)?;
    Ok((weights, disconnected))
}

/// H = ReLU(sum_c weights_c * A_c).
pub fn gradcam_heatmap(weights: &Tensor, activations: &Tensor) -> Result<Tensor> {
    let shape = activations.shape();
    if shape.len() != 3 || weights.shape() != [shape[0]] {
        return Err(Error::ShapeMismatch {
            op: "gradcam_heatmap",
            expected: vec![shape.first().copied().unwrap_or(0)],
            got: weights.shape().to_vec(),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let idx: Vec<usize> = (0..c * hw).map(|i| i / hw).collect();
    let wb = weights.gather(Rc::new(idx), &[c, hw]);
    let weighted = activations.reshape(&[c, hw])?.mul(&wb)?;
    let summed = weighted.transpose2().matmul(&Tensor::ones(&[c, 1]))?;
    Ok(summed.reshape(&[h, w])?.relu())
}

/// Min-max normalization to [0,1], with the min and max treated as
/// gradient-stopped per-sample constants. A flat map normalizes to zeros
/// and is flagged degenerate.
pub fn normalize_minmax(raw: &Tensor) -> (Tensor, bool) {
    let v = raw.values();
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return (Tensor::zeros(raw.shape()), true);
    }
    let shifted = raw.add_scalar(-min);
    (shifted.scale(1.0 / (max - min)), false)
}

/// Nearest-rank top-k thresholding with ties included and exact zeros
/// excluded. Returns the binary map, the threshold, and the value-weighted
/// soft map used during training.
pub fn threshold_topk(normalized: &Tensor, k_percent: f64) -> Result<(Tensor, f64, Tensor)> {
    let n = normalized.len();
    if n == 0 {
        return Err(Error::InvalidParameter("empty saliency map".into()));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidParameter(format!(
            "k percent must be in (0,100], got {}",
            k_percent
        )));
    }
    let m = ((k_percent / 100.0) * n as f64).ceil() as usize;
    let m = m.clamp(1, n);
    let mut sorted: Vec<f64> = normalized.values().to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let theta = sorted[m - 1];
    let binary_values: Vec<f64> = normalized
        .values()
        .iter()
        .map(|&v| if v >= theta && v > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let binary = Tensor::from_values(normalized.shape(), binary_values)?;
    let masked_soft = normalized.mul(&binary)?;
    Ok((binary, theta, masked_soft))
}

/// Full per-sample pipeline: score, Grad-CAM weights, heatmap,
/// normalization, thresholding.
///
/// `sample` indexes into the batch trace. For the `PureBce` baseline the
/// evaluation saliency uses the class-contrastive `LogitAlg` score; asking
/// for a training map under `PureBce` is a contract error. `stop_weights`
/// detaches the Grad-CAM weights (first-order approximation).
pub fn explain_sample(
    trace: &ForwardTrace,
    sample: usize,
    kind: ScoreKind,
    for_training: bool,
    k_percent: f64,
    stop_weights: bool,
) -> Result<SaliencyMap> {
    let kind = match kind {
        ScoreKind::PureBce if for_training => {
            return Err(Error::Contract(
                "pure_bce produces no training-time explanation".into(),
            ))
        }
        ScoreKind::PureBce => ScoreKind::LogitAlg,
        k => k,
    };
    let ashape = trace.activations.shape();
    if ashape.len() != 4 || sample >= ashape[0] {
        return Err(Error::InvalidShape {
            op: "explain_sample",
            msg: format!("sample {} out of range for activations {:?}", sample, ashape),
        });
    }
    let (c, h, w) = (ashape[1], ashape[2], ashape[3]);
    let hw = h * w;

    let row = trace
        .logits
        .gather(Rc::new(vec![2 * sample, 2 * sample + 1]), &[2]);
    let s = score(&row, kind)?;

    // Differentiate against the whole batch activation block; only this
    // sample's slice is nonzero.
    let create_graph = for_training && !stop_weights;
    let gmap = backward(&s, std::slice::from_ref(&trace.activations), create_graph)?;
    let disconnected = gmap.is_disconnected(&trace.activations);
    let g = gmap.get(&trace.activations);

    let slice_idx: Vec<usize> = (0..c * hw).map(|i| sample * c * hw + i).collect();
    let slice_idx = Rc::new(slice_idx);
    let g_i = g.gather(Rc::clone(&slice_idx), &[c, h, w]);
    let weights = spatial_mean_per_channel(&g_i, c, hw)?;
    let weights = if for_training && stop_weights {
        weights.detach()
    } else {
        weights
    };

    let a_i = trace.activations.gather(slice_idx, &[c, h, w]);
    let raw = gradcam_heatmap(&weights, &a_i)?;
    let (normalized, degenerate) = normalize_minmax(&raw);
    let (binary, threshold, masked_soft) = threshold_topk(&normalized, k_percent)?;
    Ok(SaliencyMap {
        raw,
        normalized,
        threshold,
        binary,
        masked_soft,
        degenerate,
        disconnected,
        dims: (h, w),
    })
}
