//! Training objectives.
//!
//! Everything reduces by summation (not mean), matching the density
//! regression loss `sum |D_hat - D|^2`; segmentation terms are
//! cross-entropies of channel-softmax posteriors. The consistency
//! baselines (rank, augmentation, teacher, interpolation) treat their
//! target branch as a constant: only the prediction side carries gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pseudo::PseudoLabelSet;
use crate::surrogate::MaskSet;
use crate::tensor::{Tape, Tensor};

/// Weights of the segmentation terms: `lambda1` on labeled images,
/// `lambda2` on unlabeled images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0)
            || !(self.lambda2.is_finite() && self.lambda2 >= 0.0)
        {
            return Err(CoreError::invalid(format!(
                "loss weights must be finite and nonnegative: lambda1={}, lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Mixup interpolation coefficient in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupCoeff(f64);

impl MixupCoeff {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(CoreError::invalid(format!(
                "mixup coefficient must lie in [0, 1], got {}",
                lambda
            )));
        }
        Ok(MixupCoeff(lambda))
    }

    /// Draw from Beta(1, 1), i.e. uniform on [0, 1].
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        MixupCoeff(rng.random_range(0.0..=1.0))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// `sum |pred - target|^2`.
pub fn mse_loss(tape: &Tape, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "mse_loss",
            left: pred.shape(),
            right: target.shape(),
        });
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(&diff, &diff)?;
    tape.sum(&sq)
}

/// Target of a segmentation cross-entropy: a dense per-pixel class map or
/// the sparse entries of one pseudo-label set.
pub enum SegTarget<'a> {
    Dense(&'a [u8]),
    Sparse(&'a [(usize, usize, u8)]),
}

/// Cross-entropy of a posterior field against dense or sparse targets;
/// sparse sets cover only their member pixels and an empty set costs 0.
pub fn seg_ce_loss(tape: &Tape, probs: &Tensor, target: SegTarget<'_>) -> Result<Tensor> {
    match target {
        SegTarget::Dense(classes) => tape.nll_dense(probs, classes),
        SegTarget::Sparse(entries) => tape.nll_sparse(probs, entries),
    }
}

/// Labeled-image loss: density MSE plus `lambda1` times the sum of
/// dense segmentation cross-entropies against the ground-truth masks.
pub fn labeled_loss(
    tape: &Tape,
    pred_density: &Tensor,
    true_density: &Tensor,
    probs: &[Tensor],
    masks: &MaskSet,
    weights: &LossWeights,
) -> Result<Tensor> {
    weights.validate()?;
    if probs.len() != masks.masks.len() {
        return Err(CoreError::invalid(format!(
            "{} posterior fields but {} ground-truth masks",
            probs.len(),
            masks.masks.len()
        )));
    }
    let mut loss = mse_loss(tape, pred_density, true_density)?;
    if weights.lambda1 > 0.0 && !probs.is_empty() {
        let mut seg = seg_ce_loss(tape, &probs[0], SegTarget::Dense(&masks.masks[0]))?;
        for (field, mask) in probs.iter().zip(&masks.masks).skip(1) {
            let term = seg_ce_loss(tape, field, SegTarget::Dense(mask))?;
            seg = tape.add(&seg, &term)?;
        }
        let weighted = tape.scale(&seg, weights.lambda1)?;
        loss = tape.add(&loss, &weighted)?;
    }
    Ok(loss)
}

/// Unlabeled-image loss: `lambda2` times the pseudo-label cross-entropy,
/// summed over predictors. Backward reaches only the extractor and the
/// segmentation heads; density-head gradients stay exactly zero.
pub fn unlabeled_loss(
    tape: &Tape,
    probs: &[Tensor],
    labels: &PseudoLabelSet,
    weights: &LossWeights,
) -> Result<Tensor> {
    weights.validate()?;
    if probs.len() != labels.sets.len() {
        return Err(CoreError::invalid(format!(
            "{} posterior fields but {} pseudo-label sets",
            probs.len(),
            labels.sets.len()
        )));
    }
    if weights.lambda2 == 0.0 || labels.total_labels() == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let mut seg: Option<Tensor> = None;
    for (field, set) in probs.iter().zip(&labels.sets) {
        if set.is_empty() {
            continue;
        }
        let term = seg_ce_loss(tape, field, SegTarget::Sparse(set))?;
        seg = Some(match seg {
            Some(acc) => tape.add(&acc, &term)?,
            None => term,
        });
    }
    match seg {
        Some(acc) => tape.scale(&acc, weights.lambda2),
        None => Ok(Tensor::scalar(0.0)),
    }
}

/// Ranking loss over nested-crop counts, smallest crop first: every pair
/// where an inner crop out-counts an outer one pays the margin.
/// `sum_s sum_{t<=s} max(0, C_t - C_s)`.
pub fn rank_loss(tape: &Tape, counts: &[Tensor]) -> Result<Tensor> {
    if counts.len() < 2 {
        return Err(CoreError::invalid(format!(
            "rank loss needs at least 2 crops, got {}",
            counts.len()
        )));
    }
    for c in counts {
        if c.numel() != 1 {
            return Err(CoreError::invalid("rank loss expects scalar counts".to_string()));
        }
    }
    let mut loss = Tensor::scalar(0.0);
    for s in 0..counts.len() {
        for t in 0..=s {
            let diff = tape.sub(&counts[t], &counts[s])?;
            let hinge = tape.relu(&diff)?;
            loss = tape.add(&loss, &hinge)?;
        }
    }
    Ok(loss)
}

/// Augmentation-consistency loss: `sum |D_aug - D|^2` with the clean
/// prediction treated as the (detached) target.
pub fn uda_loss(tape: &Tape, pred_aug: &Tensor, pred_clean: &Tensor) -> Result<Tensor> {
    mse_loss(tape, pred_aug, &pred_clean.detach())
}

/// Teacher-consistency loss: `sum |D_student - D_teacher|^2`; the teacher
/// map is already a constant (produced off-tape by the EMA copy).
pub fn mt_loss(tape: &Tape, pred_student: &Tensor, pred_teacher: &Tensor) -> Result<Tensor> {
    mse_loss(tape, pred_student, &pred_teacher.detach())
}

/// Interpolation-consistency loss: the prediction on the mixed input is
/// pulled toward the matching mixture of the two branch predictions
/// (targets detached).
pub fn ict_loss(
    tape: &Tape,
    pred_mixed: &Tensor,
    pred_aug: &Tensor,
    pred_clean: &Tensor,
    lambda: MixupCoeff,
) -> Result<Tensor> {
    if pred_aug.shape() != pred_clean.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "ict_loss",
            left: pred_aug.shape(),
            right: pred_clean.shape(),
        });
    }
    let l = lambda.value();
    let target_values: Vec<f64> = pred_aug
        .values()
        .iter()
        .zip(pred_clean.values().iter())
        .map(|(a, c)| l * a + (1.0 - l) * c)
        .collect();
    let target = Tensor::from_vec(target_values, &pred_aug.shape())?;
    mse_loss(tape, pred_mixed, &target)
}
