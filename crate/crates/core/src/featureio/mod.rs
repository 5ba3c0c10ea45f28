//! Feature containers, manifests, temporal resampling and synthetic data.

mod avfe;
mod manifest;
mod resample;
mod synth;

pub use avfe::{
    decode_features, decode_mask, encode_features, encode_mask, read_features, read_mask,
    write_features, write_mask, FeatureSequence, Modality, AVFE_HEADER_LEN, AVFE_MAGIC,
    AVFE_VERSION, AVGT_MAGIC,
};
pub use manifest::{Manifest, VideoRecord};
pub use resample::{raw_frame_owner, resample, resample_indices};
pub use synth::{synth_generate, write_dataset, SynthConfig, SynthDataset, SynthVideo, WrittenDataset};

use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// A video ready for the model: resampled features plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub visual: Tensor,
    pub audio: Option<Tensor>,
    pub label: Vec<usize>,
    /// Per raw frame class index, when annotated.
    pub frame_gt: Option<Vec<u8>>,
    /// Raw frame index of every kept feature row.
    pub kept: Vec<usize>,
    pub n_raw: usize,
}

impl VideoSample {
    pub fn n_frames(&self) -> usize {
        self.visual.rows()
    }

    pub fn is_anomalous(&self) -> bool {
        self.label.iter().any(|&c| c != 0)
    }

    /// Spread per-kept-frame values back over the raw frame axis.
    pub fn expand_to_raw(&self, values: &[f64]) -> Vec<f64> {
        raw_frame_owner(&self.kept, self.n_raw)
            .into_iter()
            .map(|j| values[j])
            .collect()
    }
}

/// Which feature streams a loader must provide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    pub visual: bool,
    pub audio: bool,
}

/// Load every video of a manifest, resampling with `stride` and `max_len`.
pub fn load_split(
    manifest_path: impl AsRef<Path>,
    stride: usize,
    max_len: usize,
    streams: Streams,
) -> Result<Vec<VideoSample>> {
    let manifest = Manifest::read(manifest_path)?;
    let mut out = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let visual = read_features(manifest.resolve(&rec.visual_path))?;
        let n_raw = visual.n_frames;
        let kept = resample_indices(n_raw, stride, max_len)?;
        let visual = resample(&visual, stride, max_len)?;
        let audio = match (&rec.audio_path, streams.audio) {
            (Some(p), _) => {
                let a = read_features(manifest.resolve(p))?;
                if a.n_frames != n_raw {
                    return Err(Error::Data(format!(
                        "video {}: audio has {} frames, visual has {n_raw}",
                        rec.video_id, a.n_frames
                    )));
                }
                Some(resample(&a, stride, max_len)?.to_tensor())
            }
            (None, true) => {
                return Err(Error::Data(format!(
                    "video {}: audio features required but no audio_path",
                    rec.video_id
                )))
            }
            (None, false) => None,
        };
        let frame_gt = match &rec.frame_gt_path {
            Some(p) => {
                let mask = read_mask(manifest.resolve(p))?;
                if mask.len() != n_raw {
                    return Err(Error::Data(format!(
                        "video {}: frame mask has {} entries for {n_raw} frames",
                        rec.video_id,
                        mask.len()
                    )));
                }
                Some(mask)
            }
            None => None,
        };
        out.push(VideoSample {
            id: rec.video_id.clone(),
            visual: visual.to_tensor(),
            audio,
            label: rec.label.clone(),
            frame_gt,
            kept,
            n_raw,
        });
    }
    Ok(out)
}
