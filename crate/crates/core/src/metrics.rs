//! Frame-level average precision, temporal segment mAP over IoU thresholds,
//! and the proposal rule that turns score curves into segments.
//!
//! AP is the all-points estimate: precision is sampled after every group of
//! equally scored items and weighted by the positives in that group.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IoU thresholds of the segment protocol.
pub const IOU_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
/// Score thresholds swept by the proposal rule.
pub const PROPOSAL_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const PROPOSAL_MIN_LEN: usize = 2;

/// A temporal detection or annotation: frames `start..end` of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub video: usize,
    pub class: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Temporal intersection over union; zero across videos.
    pub fn iou(&self, other: &Segment) -> f64 {
        if self.video != other.video {
            return 0.0;
        }
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.len() + other.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// All-points AP of items listed in ranking order. `scores` must be
/// non-increasing; equal scores form one group.
fn ranked_ap(scores: &[f64], hits: &[bool], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut i = 0;
    while i < scores.len() {
        let mut j = i;
        let mut group_tp = 0;
        while j < scores.len() && scores[j] == scores[i] {
            group_tp += hits[j] as usize;
            j += 1;
        }
        tp += group_tp;
        if group_tp > 0 {
            ap += (tp as f64 / j as f64) * group_tp as f64;
        }
        i = j;
    }
    ap / n_pos as f64
}

fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Frame-level AP. `None` when there is no positive frame.
pub fn frame_ap(scores: &[f64], gt: &[bool]) -> Result<Option<f64>> {
    if scores.len() != gt.len() {
        return Err(Error::Dimension {
            op: "frame_ap",
            lhs: vec![scores.len()],
            rhs: vec![gt.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric {
            op: "frame_ap",
            detail: "NaN score".into(),
        });
    }
    let n_pos = gt.iter().filter(|&&g| g).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let order = descending(scores);
    let s: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let h: Vec<bool> = order.iter().map(|&i| gt[i]).collect();
    Ok(Some(ranked_ap(&s, &h, n_pos)))
}

/// Maximal runs with score strictly above `threshold` and at least `min_len`
/// frames, scored by their mean.
pub fn proposals_from_curve(
    scores: &[f64],
    video: usize,
    class: usize,
    threshold: f64,
    min_len: usize,
) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < scores.len() {
        if scores[i] > threshold {
            let start = i;
            while i < scores.len() && scores[i] > threshold {
                i += 1;
            }
            if i - start >= min_len.max(1) {
                let score = scores[start..i].iter().sum::<f64>() / (i - start) as f64;
                out.push(Segment {
                    video,
                    class,
                    start,
                    end: i,
                    score,
                });
            }
        } else {
            i += 1;
        }
    }
    out
}

/// Proposals pooled over several thresholds, deduplicated by extent.
pub fn sweep_proposals(
    scores: &[f64],
    video: usize,
    class: usize,
    thresholds: &[f64],
    min_len: usize,
) -> Vec<Segment> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &t in thresholds {
        for seg in proposals_from_curve(scores, video, class, t, min_len) {
            if seen.insert((seg.start, seg.end)) {
                out.push(seg);
            }
        }
    }
    out
}

/// Ground-truth segments: maximal runs of one non-zero class in a per-frame mask.
pub fn segments_from_mask(mask: &[u8], video: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        let c = mask[i];
        let start = i;
        while i < mask.len() && mask[i] == c {
            i += 1;
        }
        if c != 0 {
            out.push(Segment {
                video,
                class: c as usize,
                start,
                end: i,
                score: 1.0,
            });
        }
    }
    out
}

/// AP of one class's predictions at one IoU threshold. Predictions are
/// ranked by score (stable) and greedily matched, each to the unmatched
/// ground truth of highest IoU, when that IoU is at least `iou`.
pub fn class_ap_at_iou(preds: &[Segment], gts: &[Segment], iou: f64) -> f64 {
    let order = descending(&preds.iter().map(|p| p.score).collect::<Vec<_>>());
    let mut used = vec![false; gts.len()];
    let mut scores = Vec::with_capacity(preds.len());
    let mut hits = Vec::with_capacity(preds.len());
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] {
                continue;
            }
            let o = p.iou(g);
            if o >= iou && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
        }
        scores.push(p.score);
        hits.push(best.is_some());
    }
    ranked_ap(&scores, &hits, gts.len())
}

/// Per-class AP at one threshold, keyed by class, for classes present in the
/// ground truth, and their mean (`None` without any ground truth).
pub fn map_at_iou(preds: &[Segment], gts: &[Segment], iou: f64) -> (Vec<(usize, f64)>, Option<f64>) {
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    let per_class: Vec<(usize, f64)> = classes
        .iter()
        .map(|&c| {
            let p: Vec<Segment> = preds.iter().filter(|s| s.class == c).cloned().collect();
            let g: Vec<Segment> = gts.iter().filter(|s| s.class == c).cloned().collect();
            (c, class_ap_at_iou(&p, &g, iou))
        })
        .collect();
    let mean = if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().map(|(_, a)| a).sum::<f64>() / per_class.len() as f64)
    };
    (per_class, mean)
}

/// Per-video inputs of the evaluation, on the raw frame axis.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub id: String,
    /// Frame anomaly confidence.
    pub frame_scores: Vec<f64>,
    /// One curve per class; index 0 (normal) is ignored.
    pub class_curves: Vec<Vec<f64>>,
    /// Per-frame class index, when annotated.
    pub gt: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class: String,
    pub gt_segments: usize,
    pub pred_segments: usize,
    /// AP at each IoU threshold.
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub videos: usize,
    pub annotated_videos: usize,
    pub frames: usize,
    pub positive_frames: usize,
    pub gt_segments: usize,
    pub pred_segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame_ap: Option<f64>,
    pub iou_thresholds: Vec<f64>,
    /// mAP at each IoU threshold; `None` without annotated anomalous segments.
    pub map_per_iou: Option<Vec<f64>>,
    pub avg_map: Option<f64>,
    pub per_class: Vec<ClassBreakdown>,
    pub counts: EvalCounts,
    pub proposal_rule: String,
    pub notices: Vec<String>,
}

/// Evaluate a split. Videos without ground truth are skipped with a notice.
pub fn evaluate_scores(videos: &[VideoScores], class_names: &[String]) -> Result<EvalReport> {
    let mut notices = Vec::new();
    let mut all_scores = Vec::new();
    let mut all_gt = Vec::new();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut annotated = 0;
    for (vi, v) in videos.iter().enumerate() {
        let Some(gt) = &v.gt else {
            notices.push(format!("video {}: no frame annotation, skipped by frame and segment metrics", v.id));
            continue;
        };
        if gt.len() != v.frame_scores.len() {
            return Err(Error::Data(format!(
                "video {}: {} scores for {} annotated frames",
                v.id,
                v.frame_scores.len(),
                gt.len()
            )));
        }
        annotated += 1;
        all_scores.extend_from_slice(&v.frame_scores);
        all_gt.extend(gt.iter().map(|&g| g != 0));
        gts.extend(segments_from_mask(gt, vi));
        for (c, curve) in v.class_curves.iter().enumerate().skip(1) {
            if curve.len() != gt.len() {
                return Err(Error::Data(format!(
                    "video {}: class curve {c} has {} frames, expected {}",
                    v.id,
                    curve.len(),
                    gt.len()
                )));
            }
            preds.extend(sweep_proposals(curve, vi, c, &PROPOSAL_THRESHOLDS, PROPOSAL_MIN_LEN));
        }
    }
    if let Some(bad) = gts.iter().find(|g| g.class >= class_names.len()) {
        return Err(Error::Data(format!(
            "video {}: annotated class {} but only {} classes",
            videos[bad.video].id,
            bad.class,
            class_names.len()
        )));
    }
    let frame_ap = frame_ap(&all_scores, &all_gt)?;
    if frame_ap.is_none() {
        notices.push("no anomalous frames annotated: frame AP undefined".into());
    }

    let mut per_iou = Vec::new();
    let mut by_class: Vec<Vec<(usize, f64)>> = Vec::new();
    for &t in &IOU_THRESHOLDS {
        let (pc, mean) = map_at_iou(&preds, &gts, t);
        by_class.push(pc);
        per_iou.push(mean);
    }
    let map_per_iou: Option<Vec<f64>> = per_iou.into_iter().collect();
    if map_per_iou.is_none() {
        notices.push("no anomalous segments annotated: mAP undefined".into());
    }
    let avg_map = map_per_iou
        .as_ref()
        .map(|m| m.iter().sum::<f64>() / m.len() as f64);

    let gt_classes: BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    let per_class = gt_classes
        .iter()
        .enumerate()
        .map(|(k, &c)| ClassBreakdown {
            class: class_names[c].clone(),
            gt_segments: gts.iter().filter(|g| g.class == c).count(),
            pred_segments: preds.iter().filter(|p| p.class == c).count(),
            ap: by_class.iter().map(|pc| pc[k].1).collect(),
        })
        .collect();

    Ok(EvalReport {
        frame_ap,
        iou_thresholds: IOU_THRESHOLDS.to_vec(),
        map_per_iou,
        avg_map,
        per_class,
        counts: EvalCounts {
            videos: videos.len(),
            annotated_videos: annotated,
            frames: all_scores.len(),
            positive_frames: all_gt.iter().filter(|&&g| g).count(),
            gt_segments: gts.len(),
            pred_segments: preds.len(),
        },
        proposal_rule: format!(
            "runs above each threshold in {PROPOSAL_THRESHOLDS:?}, min length {PROPOSAL_MIN_LEN}, \
             scored by mean, pooled and deduplicated; normal class excluded"
        ),
        notices,
    })
}
