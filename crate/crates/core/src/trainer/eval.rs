use crate::avmodel::{Architecture, DetectionOutput, ModelParams};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::featureio::{FeatureSequence, Modality, VideoSample};
use crate::metrics::{evaluate_scores, EvalReport, VideoScores};

/// Run the network on one video with the streams its architecture needs.
pub fn detect_video(params: &ModelParams, sample: &VideoSample) -> Result<DetectionOutput> {
    let visual = params.arch.uses_visual().then_some(&sample.visual);
    let audio = if params.arch.uses_audio() {
        Some(sample.audio.as_ref().ok_or_else(|| {
            Error::Data(format!("video {}: audio features missing", sample.id))
        })?)
    } else {
        None
    };
    params.infer(visual, audio)
}

/// Per-class frame curves: the anomaly confidence split across the anomaly
/// classes by a tempered softmax over their alignment scores. The normal
/// class curve (index 0) is all zeros.
pub fn class_curves(a: &[f64], m: &Tensor, tau: f64) -> Vec<Vec<f64>> {
    let (n, c) = m.dims2();
    let mut curves = vec![vec![0.0; n]; c];
    for i in 0..n {
        let row = &m.row(i)[1..];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|s| ((s - mx) / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        for (k, ek) in e.iter().enumerate() {
            curves[k + 1][i] = a[i] * ek / z;
        }
    }
    curves
}

fn video_scores(sample: &VideoSample, a: &[f64], m: &Tensor, tau: f64) -> VideoScores {
    VideoScores {
        id: sample.id.clone(),
        frame_scores: sample.expand_to_raw(a),
        class_curves: class_curves(a, m, tau)
            .iter()
            .map(|c| sample.expand_to_raw(c))
            .collect(),
        gt: sample.frame_gt.clone(),
    }
}

/// Score every video and compute the split's metrics.
pub fn evaluate(params: &ModelParams, samples: &[VideoSample], classes: &[String], tau: f64) -> Result<EvalReport> {
    check_classes(params.config.n_classes, classes)?;
    let mut scored = Vec::with_capacity(samples.len());
    for s in samples {
        let out = detect_video(params, s)?;
        scored.push(video_scores(s, &out.a, &out.m, tau));
    }
    evaluate_scores(&scored, classes)
}

fn check_classes(n: usize, classes: &[String]) -> Result<()> {
    if n != classes.len() {
        return Err(Error::Config(format!(
            "model has {n} classes but {} class names are configured",
            classes.len()
        )));
    }
    Ok(())
}

/// Score dump of one video: an `N x (1 + C)` matrix, the anomaly confidence
/// followed by the alignment map, in the feature container with the scores tag.
pub fn score_dump(video_id: &str, out: &DetectionOutput) -> Result<FeatureSequence> {
    let (n, c) = out.m.dims2();
    let mut data = Vec::with_capacity(n * (c + 1));
    for i in 0..n {
        data.push(out.a[i] as f32);
        data.extend(out.m.row(i).iter().map(|&v| v as f32));
    }
    FeatureSequence::new(video_id, Modality::Scores, n, c + 1, data)
}

/// Split a score dump back into `(A, M)`.
pub fn parse_score_dump(seq: &FeatureSequence) -> Result<(Vec<f64>, Tensor)> {
    if seq.modality != Modality::Scores {
        return Err(Error::Data(format!(
            "video {}: expected a score dump, found {:?} features",
            seq.video_id, seq.modality
        )));
    }
    if seq.dim < 3 {
        return Err(Error::Data(format!(
            "video {}: score dump has {} columns, needs 1 + at least 2 classes",
            seq.video_id, seq.dim
        )));
    }
    let c = seq.dim - 1;
    let mut a = Vec::with_capacity(seq.n_frames);
    let mut m = Vec::with_capacity(seq.n_frames * c);
    for i in 0..seq.n_frames {
        let row = seq.row(i);
        a.push(row[0] as f64);
        m.extend(row[1..].iter().map(|&v| v as f64));
    }
    Ok((a, Tensor::matrix(seq.n_frames, c, m)?))
}

/// Metrics from precomputed score dumps, matched to samples by video id.
pub fn evaluate_dumps(
    samples: &[VideoSample],
    dumps: &[FeatureSequence],
    classes: &[String],
    tau: f64,
) -> Result<EvalReport> {
    let mut scored = Vec::with_capacity(samples.len());
    for s in samples {
        let dump = dumps
            .iter()
            .find(|d| d.video_id == s.id)
            .ok_or_else(|| Error::Data(format!("video {}: no score dump", s.id)))?;
        let (a, m) = parse_score_dump(dump)?;
        if a.len() != s.n_frames() {
            return Err(Error::Data(format!(
                "video {}: score dump has {} frames, features have {}",
                s.id,
                a.len(),
                s.n_frames()
            )));
        }
        check_classes(m.cols(), classes)?;
        scored.push(video_scores(s, &a, &m, tau));
    }
    evaluate_scores(&scored, classes)
}

/// Streams an architecture reads, for the loader.
pub fn streams_for(arch: Architecture) -> crate::featureio::Streams {
    crate::featureio::Streams {
        visual: arch.uses_visual(),
        audio: arch.uses_audio(),
    }
}
