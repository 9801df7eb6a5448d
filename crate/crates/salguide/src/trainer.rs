//! Adam-based training loop with explanation supervision on positive
//! annotated samples, plus split evaluation.
//!
//! One run is strictly single-threaded and deterministic: shuffling and
//! dropout draw from separate generators derived from the run seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotations::{box_to_grid, rasterize_union, Mask};
use crate::diffcore::{backward, GradientMap, Tensor};
use crate::error::{Error, Result};
use crate::explain::explain_sample;
use crate::metrics::{
    all_saliency_precision, annotation_coverage, top_saliency_precision, MetricsRecord,
};
use crate::model::Model;
use crate::objective::batch_objective;
use crate::scores::ScoreKind;
use crate::synthdata::Sample;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const SHUFFLE_STREAM: u64 = 0x5348_5546; // distinct rng streams per purpose
const DROPOUT_STREAM: u64 = 0x44524f50;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub score_kind: ScoreKind,
    pub k_percent: f64,
    pub seed: u64,
    pub stop_weights: bool,
    pub tau_cov: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            batch_size: 12,
            alpha: 0.5,
            score_kind: ScoreKind::LogitSqr,
            k_percent: 50.0,
            seed: 0,
            stop_weights: false,
            tau_cov: crate::metrics::DEFAULT_TAU_COV,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 || self.alpha < 0.0 {
            return Err(Error::InvalidParameter(
                "learning_rate must be positive; weight_decay and alpha nonnegative".into(),
            ));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(Error::InvalidParameter(format!(
                "k_percent must be in (0,100], got {}",
                self.k_percent
            )));
        }
        Ok(())
    }
}

/// Per-parameter Adam moments, aligned with the model's parameter order.
pub struct AdamState {
    pub step: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub bce: f64,
    /// Weighted explanation term alpha * L_exp.
    pub exp_weighted: f64,
    pub total: f64,
    pub val_accuracy: f64,
}

pub type EpochHistory = Vec<EpochStats>;

/// Standard bias-corrected Adam update with coupled L2 weight decay
/// (g <- g + wd * theta). Returns the updated parameter tensors.
pub fn adam_step(
    params: &[Tensor],
    grads: &GradientMap,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<Vec<Tensor>> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    let mut out = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let g = grads.get(p);
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        let mut new_values = p.values().to_vec();
        for (j, theta) in new_values.iter_mut().enumerate() {
            let grad = g.values()[j] + weight_decay * *theta;
            let m = &mut state.m[i][j];
            let v = &mut state.v[i][j];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grad;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grad * grad;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        out.push(Tensor::parameter(p.shape(), new_values)?);
    }
    Ok(out)
}

fn batch_tensor(samples: &[&Sample], input_size: usize) -> Result<Tensor> {
    let mut values = Vec::with_capacity(samples.len() * input_size * input_size);
    for s in samples {
        if s.image.len() != input_size * input_size {
            return Err(Error::InvalidShape {
                op: "batch_tensor",
                msg: format!(
                    "sample {} has {} pixels, model expects {}x{}",
                    s.name,
                    s.image.len(),
                    input_size,
                    input_size
                ),
            });
        }
        values.extend_from_slice(&s.image);
    }
    Tensor::from_values(&[samples.len(), 1, input_size, input_size], values)
}

fn split_accuracy(model: &Model, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = batch_tensor(&refs, model.config.input_size)?;
        let trace = model.forward(&batch, false, &mut rng)?;
        let v = trace.logits.values();
        for (i, s) in chunk.iter().enumerate() {
            let pred = u8::from(v[2 * i + 1] > v[2 * i]);
            if pred == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Train in place. Explanation supervision applies only to positive samples
/// with annotations; the `PureBce` baseline and alpha = 0 reduce exactly to
/// plain BCE training.
pub fn train(
    model: &mut Model,
    train_samples: &[Sample],
    val_samples: &[Sample],
    config: &TrainConfig,
) -> Result<EpochHistory> {
    config.validate()?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::InvalidParameter("empty train or val split".into()));
    }
    let input_size = model.config.input_size;
    let saliency_size = model.config.saliency_size();

    let masks: Vec<Option<Mask>> = train_samples
        .iter()
        .map(|s| {
            if s.label == 1 && !s.boxes.is_empty() {
                Some(rasterize_union(&s.boxes, input_size, saliency_size))
            } else {
                None
            }
        })
        .map(|m| m.transpose())
        .collect::<Result<_>>()?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_STREAM);
    let mut state = AdamState::new(model.parameters());
    let mut history = Vec::with_capacity(config.epochs);
    let n = train_samples.len();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut bce_sum = 0.0;
        let mut expw_sum = 0.0;
        let mut total_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| train_samples[i].label).collect();
            let batch_masks: Vec<Option<Mask>> =
                chunk.iter().map(|&i| masks[i].clone()).collect();
            let batch = batch_tensor(&refs, input_size)?;
            let trace = model.forward(&batch, true, &mut dropout_rng)?;
            let loss = batch_objective(
                &trace,
                &labels,
                &batch_masks,
                config.score_kind,
                config.alpha,
                config.k_percent,
                config.stop_weights,
            )?;
            if !loss.total.item().is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let w = chunk.len() as f64 / n as f64;
            bce_sum += w * loss.bce.item();
            expw_sum += w * config.alpha * loss.exp.item();
            total_sum += w * loss.total.item();

            let grads = backward(&loss.total, model.parameters(), false)?;
            let updated = adam_step(
                model.parameters(),
                &grads,
                &mut state,
                config.learning_rate,
                config.weight_decay,
            )?;
            model.set_parameters(updated)?;
        }

        let val_accuracy = split_accuracy(model, val_samples, config.batch_size)?;
        history.push(EpochStats {
            bce: bce_sum,
            exp_weighted: expw_sum,
            total: total_sum,
            val_accuracy,
        });
    }
    Ok(history)
}

/// Evaluation-mode metrics over one split: accuracy over all samples,
/// explanation metrics over positive annotated samples, coverage over all
/// of their boxes.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    kind: ScoreKind,
    k_percent: f64,
    tau_cov: f64,
) -> Result<MetricsRecord> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("empty evaluation split".into()));
    }
    let input_size = model.config.input_size;
    let saliency_size = model.config.saliency_size();
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode

    let mut correct = 0usize;
    let mut top_vals = Vec::new();
    let mut all_vals = Vec::new();
    let mut covered = 0usize;
    let mut total_boxes = 0usize;
    let mut n_degenerate = 0usize;

    for chunk in samples.chunks(32) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = batch_tensor(&refs, input_size)?;
        let trace = model.forward(&batch, false, &mut rng)?;
        let logits = trace.logits.values();
        for (i, s) in chunk.iter().enumerate() {
            let pred = u8::from(logits[2 * i + 1] > logits[2 * i]);
            if pred == s.label {
                correct += 1;
            }
            if s.label != 1 || s.boxes.is_empty() {
                continue;
            }
            let sal = explain_sample(&trace, i, kind, false, k_percent, false)?;
            let mask = rasterize_union(&s.boxes, input_size, saliency_size)?;
            let grid_boxes: Vec<_> = s
                .boxes
                .iter()
                .map(|b| box_to_grid(b, input_size, saliency_size))
                .collect::<Result<_>>()?;
            let (c, t) =
                annotation_coverage(sal.binary.values(), saliency_size, &grid_boxes, tau_cov)?;
            covered += c;
            total_boxes += t;
            if sal.degenerate {
                n_degenerate += 1;
                continue;
            }
            if let Some(p) = top_saliency_precision(sal.binary.values(), &mask.grid)? {
                top_vals.push(p);
            }
            if let Some(p) = all_saliency_precision(sal.normalized.values(), &mask.grid)? {
                all_vals.push(p);
            }
        }
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MetricsRecord {
        accuracy: correct as f64 / samples.len() as f64,
        coverage: if total_boxes == 0 {
            0.0
        } else {
            covered as f64 / total_boxes as f64
        },
        top_precision: mean(&top_vals),
        all_precision: mean(&all_vals),
        n_samples: samples.len(),
        n_boxes: total_boxes,
        n_degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::BBox;
    use crate::model::{init_model, ModelConfig};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            channels: [2, 3, 3],
            ..ModelConfig::default()
        }
    }

    /// Positives: bright 4x4 square at a fixed offset; negatives: dim field.
    fn toy_samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let mut image = vec![0.1; 256];
                if label == 1 {
                    for y in 6..10 {
                        for x in 6..10 {
                            image[y * 16 + x] = 0.9;
                        }
                    }
                }
                for v in image.iter_mut() {
                    *v += rng.gen_range(-0.02..0.02);
                }
                let boxes = if label == 1 {
                    vec![BBox::new(5, 5, 10, 10)]
                } else {
                    vec![]
                };
                Sample {
                    name: format!("{:02}", i),
                    image,
                    label,
                    boxes,
                }
            })
            .collect()
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let p = Tensor::parameter(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = Tensor::parameter(&[1], vec![0.0]).unwrap().sum();
        let grads = backward(&loss, std::slice::from_ref(&p), false).unwrap();
        let mut state = AdamState::new(std::slice::from_ref(&p));
        let out = adam_step(std::slice::from_ref(&p), &grads, &mut state, 0.1, 0.0).unwrap();
        assert_eq!(out[0].values(), p.values());
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let p = Tensor::parameter(&[2], vec![1.0, -1.0]).unwrap();
        // Constant gradient: d/dp of sum(p * c) with c = (2, -3).
        let c = Tensor::from_values(&[2], vec![2.0, -3.0]).unwrap();
        let loss = p.mul(&c).unwrap().sum();
        let grads = backward(&loss, std::slice::from_ref(&p), false).unwrap();
        let mut state = AdamState::new(std::slice::from_ref(&p));
        let lr = 0.05;
        let out = adam_step(std::slice::from_ref(&p), &grads, &mut state, lr, 0.0).unwrap();
        // First bias-corrected step is -lr * g/|g| up to eps effects.
        assert!((out[0].values()[0] - (1.0 - lr)).abs() < 1e-6);
        assert!((out[0].values()[1] - (-1.0 + lr)).abs() < 1e-6);
    }

    fn run_training(kind: ScoreKind, alpha: f64, seed: u64, epochs: usize) -> (Vec<Vec<f64>>, EpochHistory) {
        let cfg = tiny_model_config();
        let mut model = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let samples = toy_samples(20, 4);
        let tc = TrainConfig {
            epochs,
            learning_rate: 5e-3,
            batch_size: 5,
            alpha,
            score_kind: kind,
            seed,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &samples, &samples, &tc).unwrap();
        let params = model.parameters().iter().map(|p| p.values().to_vec()).collect();
        (params, history)
    }

    #[test]
    fn pure_bce_loss_decreases_on_toy_set() {
        let (_, history) = run_training(ScoreKind::PureBce, 0.0, 1, 2);
        assert!(
            history[1].bce < history[0].bce,
            "bce did not decrease: {} -> {}",
            history[0].bce,
            history[1].bce
        );
    }

    #[test]
    fn alpha_zero_total_equals_bce() {
        let (_, history) = run_training(ScoreKind::LogitSqr, 0.0, 2, 2);
        for e in &history {
            assert_eq!(e.total, e.bce);
            assert_eq!(e.exp_weighted, 0.0);
        }
    }

    #[test]
    fn same_seed_identical_history() {
        let (p1, h1) = run_training(ScoreKind::LogitAlg, 0.5, 3, 2);
        let (p2, h2) = run_training(ScoreKind::LogitAlg, 0.5, 3, 2);
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn alpha_zero_reproduces_pure_bce_trajectory_bitwise() {
        let (p_bce, _) = run_training(ScoreKind::PureBce, 0.0, 5, 2);
        let (p_guided, _) = run_training(ScoreKind::LogitSqr, 0.0, 5, 2);
        for (a, b) in p_bce.iter().zip(&p_guided) {
            let a_bits: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let b_bits: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a_bits, b_bits);
        }
    }

    #[test]
    fn epoch_identity_total_is_bce_plus_weighted_exp() {
        let (_, history) = run_training(ScoreKind::LogitSqr, 0.75, 6, 2);
        for e in &history {
            assert!(
                (e.total - (e.bce + e.exp_weighted)).abs() <= 1e-9,
                "identity violated: {} vs {} + {}",
                e.total,
                e.bce,
                e.exp_weighted
            );
        }
    }

    #[test]
    fn empty_split_is_an_error() {
        let cfg = tiny_model_config();
        let mut model = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let samples = toy_samples(4, 0);
        let tc = TrainConfig::default();
        assert!(train(&mut model, &[], &samples, &tc).is_err());
        assert!(train(&mut model, &samples, &[], &tc).is_err());
    }

    #[test]
    fn evaluate_ranges_and_constant_model() {
        let cfg = tiny_model_config();
        let model = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let samples = toy_samples(10, 1);
        let rec = evaluate(&model, &samples, ScoreKind::LogitAlg, 50.0, 0.01).unwrap();
        for v in [rec.accuracy, rec.coverage, rec.top_precision, rec.all_precision] {
            assert!((0.0..=1.0).contains(&v), "metric {} out of range", v);
        }
        assert_eq!(rec.n_samples, 10);
        assert_eq!(rec.n_boxes, 5);

        // A zero-weight model predicts ties everywhere -> constant class
        // and accuracy 0.5 on the balanced toy set, with fully degenerate
        // saliency.
        let mut zero = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let zeroed = zero
            .parameters()
            .iter()
            .map(|p| Tensor::parameter(p.shape(), vec![0.0; p.len()]).unwrap())
            .collect();
        zero.set_parameters(zeroed).unwrap();
        let rec = evaluate(&zero, &samples, ScoreKind::LogitAlg, 50.0, 0.01).unwrap();
        assert_eq!(rec.accuracy, 0.5);
        assert_eq!(rec.n_degenerate, 5);
        assert_eq!(rec.top_precision, 0.0);
    }
}
