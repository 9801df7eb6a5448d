//! Scalar explanation scores derived from the two class outputs.
//!
//! The score s is what gets differentiated with respect to the final
//! convolutional activations to form Grad-CAM weights. Eight formulations
//! are supported; `PureBce` is the no-explanation baseline and has no score.

use std::rc::Rc;

use crate::diffcore::{softmax2, Tensor};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    PureBce,
    LogitAlg,
    LogitAbs,
    LogitSqr,
    LogitOnly,
    ProbAlg,
    ProbAbs,
    ProbSqr,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 8] = [
        ScoreKind::PureBce,
        ScoreKind::LogitAlg,
        ScoreKind::LogitAbs,
        ScoreKind::LogitSqr,
        ScoreKind::LogitOnly,
        ScoreKind::ProbAlg,
        ScoreKind::ProbAbs,
        ScoreKind::ProbSqr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::PureBce => "pure_bce",
            ScoreKind::LogitAlg => "logit_alg",
            ScoreKind::LogitAbs => "logit_abs",
            ScoreKind::LogitSqr => "logit_sqr",
            ScoreKind::LogitOnly => "logit_only",
            ScoreKind::ProbAlg => "prob_alg",
            ScoreKind::ProbAbs => "prob_abs",
            ScoreKind::ProbSqr => "prob_sqr",
        }
    }

    pub fn from_str(s: &str) -> Result<ScoreKind> {
        ScoreKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = ScoreKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::Usage(format!(
                    "unknown score kind '{}'; valid kinds: {}",
                    s,
                    valid.join(", ")
                ))
            })
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scalar explanation score from a single sample's logits (shape [2] or [1,2]).
///
/// Differentiable with respect to the logits; the subgradient of |.| at 0
/// is 0. `PureBce` has no score and is a contract error here.
pub fn score(logits: &Tensor, kind: ScoreKind) -> Result<Tensor> {
    if logits.len() != 2 {
        return Err(Error::InvalidShape {
            op: "score",
            msg: format!("need exactly two logits, got shape {:?}", logits.shape()),
        });
    }
    if kind == ScoreKind::PureBce {
        return Err(Error::Contract(
            "pure_bce defines no explanation score".into(),
        ));
    }
    let z0 = logits.gather(Rc::new(vec![0]), &[]);
    let z1 = logits.gather(Rc::new(vec![1]), &[]);
    let t = match kind {
        ScoreKind::LogitAlg => z1.sub(&z0)?,
        ScoreKind::LogitAbs => z1.sub(&z0)?.abs(),
        ScoreKind::LogitSqr => {
            let d = z1.sub(&z0)?;
            d.mul(&d)?
        }
        ScoreKind::LogitOnly => z1,
        ScoreKind::ProbAlg | ScoreKind::ProbAbs | ScoreKind::ProbSqr => {
            let p = softmax2(&logits.reshape(&[1, 2])?)?;
            let p0 = p.gather(Rc::new(vec![0]), &[]);
            let p1 = p.gather(Rc::new(vec![1]), &[]);
            let d = p1.sub(&p0)?;
            match kind {
                ScoreKind::ProbAlg => d,
                ScoreKind::ProbAbs => d.abs(),
                ScoreKind::ProbSqr => d.mul(&d)?,
                _ => unreachable!(),
            }
        }
        ScoreKind::PureBce => unreachable!(),
    };
    Ok(t)
}
