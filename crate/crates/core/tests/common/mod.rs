//! Brute-force reference implementations and random instance generators
//! shared by the acceptance suite and the property tests.
#![allow(dead_code)]

use avwatch_core::metrics::Segment;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// AP by enumerating every distinct threshold: at each one, recompute
/// precision and recall from scratch and add `(R_t - R_prev) * P_t`.
pub fn ap_by_thresholds(scores: &[f64], positive: &[bool], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| positive[i]).count();
        let precision = tp as f64 / selected.len() as f64;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

pub fn frame_ap_oracle(scores: &[f64], gt: &[bool]) -> Option<f64> {
    let n_pos = gt.iter().filter(|&&g| g).count();
    (n_pos > 0).then(|| ap_by_thresholds(scores, gt, n_pos))
}

/// IoU by painting frames.
pub fn iou_by_frames(a: &Segment, b: &Segment) -> f64 {
    if a.video != b.video {
        return 0.0;
    }
    let end = a.end.max(b.end);
    let (mut inter, mut union) = (0usize, 0usize);
    for f in 0..end {
        let in_a = (a.start..a.end).contains(&f);
        let in_b = (b.start..b.end).contains(&f);
        inter += (in_a && in_b) as usize;
        union += (in_a || in_b) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// One class: rank predictions by score (ties keep input order), let each
/// claim the free ground truth it overlaps most, then threshold-enumerate.
pub fn class_ap_oracle(preds: &[&Segment], gts: &[&Segment], iou: f64) -> f64 {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // Insertion sort: stable by construction.
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && preds[order[j - 1]].score < preds[order[j]].score {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut taken = vec![false; gts.len()];
    let mut hit = vec![false; preds.len()];
    for &p in &order {
        let mut best = None;
        let mut best_iou = -1.0;
        for (g, gt) in gts.iter().enumerate() {
            let o = iou_by_frames(preds[p], gt);
            if !taken[g] && o >= iou && o > best_iou {
                best = Some(g);
                best_iou = o;
            }
        }
        if let Some(g) = best {
            taken[g] = true;
            hit[p] = true;
        }
    }
    let scores: Vec<f64> = preds.iter().map(|s| s.score).collect();
    ap_by_thresholds(&scores, &hit, gts.len())
}

/// Mean class AP over classes present in the ground truth.
pub fn map_oracle(preds: &[Segment], gts: &[Segment], iou: f64) -> Option<f64> {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return None;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let p: Vec<&Segment> = preds.iter().filter(|s| s.class == c).collect();
            let g: Vec<&Segment> = gts.iter().filter(|s| s.class == c).collect();
            class_ap_oracle(&p, &g, iou)
        })
        .sum();
    Some(total / classes.len() as f64)
}

/// Scores on a coarse grid so that ties are common.
pub fn tied_scores(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = r.random_range(2..=20);
    (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect()
}

/// Frame scores and labels with at least one positive, at most 100 frames.
pub fn frame_instance(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = r.random_range(1..=100);
    let rate = r.random_range(0.05..0.95);
    let mut gt: Vec<bool> = (0..n).map(|_| r.random_bool(rate)).collect();
    let i = r.random_range(0..n);
    gt[i] = true;
    (tied_scores(r, n), gt)
}

fn random_segment(r: &mut ChaCha8Rng, video: usize, n_frames: usize, class: usize, score: f64) -> Segment {
    let start = r.random_range(0..n_frames);
    let end = r.random_range(start + 1..=n_frames.min(start + 40));
    Segment {
        video,
        class,
        start,
        end,
        score,
    }
}

/// Up to 3 videos of at most 100 frames, at most 10 ground-truth and 10
/// predicted segments over classes 1..=3; at least one ground truth.
pub fn segment_instance(r: &mut ChaCha8Rng) -> (Vec<Segment>, Vec<Segment>) {
    let videos: Vec<usize> = (0..r.random_range(1..=3)).map(|_| r.random_range(5..=100)).collect();
    let pick = |r: &mut ChaCha8Rng| {
        let v = r.random_range(0..videos.len());
        (v, videos[v], r.random_range(1..=3))
    };
    let n_gt = r.random_range(1..=10);
    let gts = (0..n_gt)
        .map(|_| {
            let (v, n, c) = pick(r);
            random_segment(r, v, n, c, 1.0)
        })
        .collect();
    let n_pred = r.random_range(0..=10);
    let levels = r.random_range(2..=6);
    let preds = (0..n_pred)
        .map(|_| {
            let (v, n, c) = pick(r);
            let s = r.random_range(1..=levels) as f64 / levels as f64;
            random_segment(r, v, n, c, s)
        })
        .collect();
    (preds, gts)
}
