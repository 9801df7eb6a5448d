//! Explanation-quality metrics and distribution summaries.
//!
//! All three metrics run on plain value slices (no graph involvement):
//! top-saliency precision on the binary map, all-saliency precision on the
//! continuous normalized map, and per-box annotation coverage. Samples
//! with zero saliency are skipped from precision means rather than
//! zero-filled, and counted separately as degenerate.

use crate::annotations::GridBox;
use crate::error::{Error, Result};

pub const DEFAULT_TAU_COV: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub accuracy: f64,
    /// Fraction of annotated boxes covered.
    pub coverage: f64,
    /// Mean top-saliency precision over evaluated samples.
    pub top_precision: f64,
    /// Mean all-saliency precision over evaluated samples.
    pub all_precision: f64,
    pub n_samples: usize,
    pub n_boxes: usize,
    pub n_degenerate: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxplotStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

fn check_dims(a: &[f64], b: &[f64], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![a.len()],
            got: vec![b.len()],
        });
    }
    Ok(())
}

/// Fraction of binary-salient pixels inside the mask; None when the map
/// has no salient pixel (sample skipped).
pub fn top_saliency_precision(binary: &[f64], mask: &[f64]) -> Result<Option<f64>> {
    check_dims(binary, mask, "top_saliency_precision")?;
    let total: f64 = binary.iter().sum();
    if total == 0.0 {
        return Ok(None);
    }
    let inside: f64 = binary.iter().zip(mask).map(|(s, m)| s * m).sum();
    Ok(Some(inside / total))
}

/// Fraction of continuous saliency mass inside the mask; None when the map
/// is all-zero (sample skipped).
pub fn all_saliency_precision(normalized: &[f64], mask: &[f64]) -> Result<Option<f64>> {
    check_dims(normalized, mask, "all_saliency_precision")?;
    let total: f64 = normalized.iter().sum();
    if total == 0.0 {
        return Ok(None);
    }
    let inside: f64 = normalized.iter().zip(mask).map(|(s, m)| s * m).sum();
    Ok(Some(inside / total))
}

/// A box is covered when its salient-pixel density reaches tau.
/// Returns (covered, total) counts for aggregation over a split.
pub fn annotation_coverage(
    binary: &[f64],
    width: usize,
    boxes: &[GridBox],
    tau: f64,
) -> Result<(usize, usize)> {
    let height = if width == 0 { 0 } else { binary.len() / width };
    let mut covered = 0;
    for b in boxes {
        if b.x1 >= width || b.y1 >= height {
            return Err(Error::InvalidParameter(format!(
                "box ({},{},{},{}) outside {}x{} grid",
                b.x0, b.y0, b.x1, b.y1, width, height
            )));
        }
        let area = b.area();
        if area == 0 {
            return Err(Error::InvalidParameter("empty box".into()));
        }
        let mut salient = 0.0;
        for y in b.y0..=b.y1 {
            for x in b.x0..=b.x1 {
                salient += binary[y * width + x];
            }
        }
        if salient / area as f64 >= tau {
            covered += 1;
        }
    }
    Ok((covered, boxes.len()))
}

/// Five-number summary plus mean; quartiles by linear interpolation
/// between closest ranks on the sorted values.
pub fn boxplot_stats(values: &[f64]) -> Result<BoxplotStats> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("boxplot_stats of empty list".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    Ok(BoxplotStats {
        min: sorted[0],
        q1: quantile(0.25),
        median: quantile(0.5),
        q3: quantile(0.75),
        max: sorted[sorted.len() - 1],
        mean: values.iter().sum::<f64>() / values.len() as f64,
    })
}
