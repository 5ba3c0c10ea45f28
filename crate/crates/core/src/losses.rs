//! Training objectives: Top-K video BCE, MIL alignment scoring, NCE, focal
//! loss and the uncertainty-weighted distillation loss.
//!
//! Every function records onto a [`Tape`] and returns a scalar node.

use serde::{Deserialize, Serialize};

use crate::avmodel::DetectionNodes;
use crate::diffcore::{Axis, NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Probability clamp for the video-level BCE.
pub const BCE_EPS: f64 = 1e-8;
/// Probability floor before taking logs in the alignment branch.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Top-K fraction: `K = max(1, floor(N * k_ratio))`.
    pub k_ratio: f64,
    /// Softmax temperature of the alignment scores.
    pub tau: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Weight of the classification branch in the teacher loss.
    pub bce_w: f64,
    /// Weight of the alignment branch in the teacher loss.
    pub align_w: f64,
    /// Weight of the student's own detection losses.
    pub task_w: f64,
    /// Weight of the distillation term.
    pub ukd_w: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            k_ratio: 1.0 / 16.0,
            tau: 0.07,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            bce_w: 1.0,
            align_w: 1.0,
            task_w: 1.0,
            ukd_w: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "loss.k_ratio must lie in (0, 1], got {}",
                self.k_ratio
            )));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!(
                "loss.focal_gamma must be non-negative, got {}",
                self.focal_gamma
            )));
        }
        for (key, w) in [
            ("loss.focal_alpha", self.focal_alpha),
            ("loss.bce_w", self.bce_w),
            ("loss.align_w", self.align_w),
            ("loss.task_w", self.task_w),
            ("loss.ukd_w", self.ukd_w),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{key} must be a finite non-negative number, got {w}")));
            }
        }
        Ok(())
    }

    /// Number of frames averaged by the Top-K pooling of an `n`-frame video.
    pub fn k_for(&self, n: usize) -> usize {
        ((n as f64 * self.k_ratio).floor() as usize).clamp(1, n.max(1))
    }
}

/// Video-level binary cross-entropy on the mean of the `k` highest frame confidences.
pub fn topk_bce(tape: &mut Tape, a: NodeId, anomalous: bool, k: usize) -> Result<NodeId> {
    let p = tape.topk_mean(a, k)?;
    let p = tape.clamp(p, BCE_EPS, 1.0 - BCE_EPS)?;
    let q = if anomalous { p } else { tape.affine(p, -1.0, 1.0)? };
    let lq = tape.log(q)?;
    tape.affine(lq, -1.0, 0.0)
}

/// Per-class video scores: mean of the top-`k` entries of each column of `m`.
/// `k` is clamped to the number of frames.
pub fn mil_align_scores(tape: &mut Tape, m: NodeId, k: usize) -> Result<NodeId> {
    let n = tape.value(m).rows();
    tape.topk_mean(m, k.clamp(1, n))
}

/// Class probabilities `softmax(s / tau)`.
pub fn class_probs(tape: &mut Tape, s: NodeId, tau: f64) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let z = tape.affine(s, 1.0 / tau, 0.0)?;
    tape.softmax(z, Axis::Cols)
}

fn target_weights(n_classes: usize, targets: &[usize]) -> Result<Tensor> {
    if targets.is_empty() {
        return Err(Error::Contract("alignment loss needs at least one target class".into()));
    }
    let mut w = vec![0.0; n_classes];
    let share = 1.0 / targets.len() as f64;
    for &t in targets {
        if t >= n_classes {
            return Err(Error::Data(format!("target class {t} outside 0..{n_classes}")));
        }
        w[t] += share;
    }
    Ok(Tensor::vector(w))
}

/// `-sum_t w_t * terms_t`, `w` uniform over the targets.
fn weighted_target_sum(tape: &mut Tape, terms: NodeId, targets: &[usize]) -> Result<NodeId> {
    let w = target_weights(tape.value(terms).numel(), targets)?;
    let w = tape.constant(w);
    let picked = tape.mul(w, terms)?;
    let s = tape.sum(picked)?;
    tape.affine(s, -1.0, 0.0)
}

fn log_probs(tape: &mut Tape, p: NodeId) -> Result<NodeId> {
    let p = tape.clamp(p, PROB_FLOOR, 1.0)?;
    tape.log(p)
}

/// Cross-entropy of the class probabilities `p` against the target classes,
/// averaged over targets.
pub fn nce_from_probs(tape: &mut Tape, p: NodeId, targets: &[usize]) -> Result<NodeId> {
    let lp = log_probs(tape, p)?;
    weighted_target_sum(tape, lp, targets)
}

/// `-log softmax(s / tau)[target]`, averaged over targets.
pub fn nce_from_scores(tape: &mut Tape, s: NodeId, tau: f64, targets: &[usize]) -> Result<NodeId> {
    let p = class_probs(tape, s, tau)?;
    nce_from_probs(tape, p, targets)
}

/// Focal loss `-alpha (1 - p_t)^gamma log p_t`, averaged over targets.
pub fn focal(tape: &mut Tape, p: NodeId, targets: &[usize], gamma: f64, alpha: f64) -> Result<NodeId> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("focal gamma must be non-negative, got {gamma}")));
    }
    let lp = log_probs(tape, p)?;
    let rest = tape.affine(p, -1.0, 1.0)?;
    let rest = tape.clamp(rest, 0.0, 1.0)?;
    let modulator = tape.pow(rest, gamma)?;
    let modulator = tape.affine(modulator, alpha, 0.0)?;
    let terms = tape.mul(modulator, lp)?;
    weighted_target_sum(tape, terms, targets)
}

/// Alignment-branch loss: the mean of NCE and focal loss on the MIL scores of `m`.
pub fn align_loss(
    tape: &mut Tape,
    m: NodeId,
    k: usize,
    targets: &[usize],
    cfg: &LossConfig,
) -> Result<NodeId> {
    let s = mil_align_scores(tape, m, k)?;
    let p = class_probs(tape, s, cfg.tau)?;
    let nce = nce_from_probs(tape, p, targets)?;
    let fl = focal(tape, p, targets, cfg.focal_gamma, cfg.focal_alpha)?;
    let both = tape.add(nce, fl)?;
    tape.affine(both, 0.5, 0.0)
}

/// Uncertainty-weighted feature distillation:
/// `mean_i ||t_i - s_i||^2 * exp(-logvar_i) + logvar_i`.
///
/// Treats the observation model `t = s + sigma * eps`, `eps ~ N(0, I)`;
/// `teacher` should be a constant node. The loss is negative when the
/// predicted variance is below one and the errors are small.
pub fn ukd_loss(tape: &mut Tape, teacher: NodeId, student: NodeId, logvar: NodeId) -> Result<NodeId> {
    if tape.shape(teacher) != tape.shape(student) {
        return Err(Error::Dimension {
            op: "ukd_loss",
            lhs: tape.shape(teacher).to_vec(),
            rhs: tape.shape(student).to_vec(),
        });
    }
    let n = tape.value(student).rows();
    if tape.shape(logvar) != [n] {
        return Err(Error::Dimension {
            op: "ukd_loss",
            lhs: tape.shape(student).to_vec(),
            rhs: tape.shape(logvar).to_vec(),
        });
    }
    let diff = tape.sub(teacher, student)?;
    let sq = tape.square(diff)?;
    let err = tape.sum_cols(sq)?;
    let neg = tape.affine(logvar, -1.0, 0.0)?;
    let precision = tape.exp(neg)?;
    let weighted = tape.mul(err, precision)?;
    let terms = tape.add(weighted, logvar)?;
    tape.mean(terms)
}

/// Scalar nodes of a per-video detection loss.
#[derive(Clone, Copy, Debug)]
pub struct TaskLoss {
    /// `bce_w * bce + align_w * align`.
    pub total: NodeId,
    pub bce: NodeId,
    pub align: NodeId,
}

/// Dual-branch detection loss of one video. `label` lists the video's
/// classes; class 0 is normal.
pub fn task_loss(
    tape: &mut Tape,
    out: &DetectionNodes,
    label: &[usize],
    cfg: &LossConfig,
) -> Result<TaskLoss> {
    let n = tape.value(out.a).numel();
    let k = cfg.k_for(n);
    let anomalous = label.iter().any(|&c| c != 0);
    let targets: Vec<usize> = if anomalous {
        label.iter().copied().filter(|&c| c != 0).collect()
    } else {
        vec![0]
    };
    let bce = topk_bce(tape, out.a, anomalous, k)?;
    let align = align_loss(tape, out.m, k, &targets, cfg)?;
    let wb = tape.affine(bce, cfg.bce_w, 0.0)?;
    let wa = tape.affine(align, cfg.align_w, 0.0)?;
    let total = tape.add(wb, wa)?;
    Ok(TaskLoss { total, bce, align })
}
