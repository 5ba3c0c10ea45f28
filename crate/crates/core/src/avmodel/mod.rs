//! Forward model: temporal encoders, gated fusion, detection heads, class
//! prompting and the student's enhancement and uncertainty nets.

mod checkpoint;
mod graph;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use graph::{
    adaptive_fuse, align_map, av_prompt, band_mask, class_embeddings, classify, detect,
    enhance_visual, global_rep, predict_uncertainty, temporal_encode_audio,
    temporal_encode_visual, DetectionNodes, NORM_EPS,
};
pub use params::{
    load_class_base, random_orthogonal_rows, Architecture, Bound, ModelConfig, ModelOptions,
    ModelParams, ParamEntry,
};

use crate::diffcore::{Tape, Tensor};
use crate::error::Result;

/// Result of running a network on one video.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    /// Frame anomaly confidence in `[0, 1]`.
    pub a: Vec<f64>,
    /// `N x C` cosine alignment map.
    pub m: Tensor,
    /// Frame features the heads consumed.
    pub features: Tensor,
    /// `C x d` instance-specific class embeddings.
    pub x_cp: Tensor,
    /// Predicted per-frame log-variance, for students that carry an uncertainty net.
    pub logvar: Option<Vec<f64>>,
}

impl ModelParams {
    /// Run the network without recording gradients.
    pub fn infer(&self, visual: Option<&Tensor>, audio: Option<&Tensor>) -> Result<DetectionOutput> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let xv = visual.map(|v| tape.constant(v.clone()));
        let xa = audio.map(|a| tape.constant(a.clone()));
        let out = detect(&mut tape, &p, &self.config, self.arch, xv, xa)?;
        Ok(DetectionOutput {
            a: tape.value(out.a).data().to_vec(),
            m: tape.value(out.m).clone(),
            features: tape.value(out.features).clone(),
            x_cp: tape.value(out.x_cp).clone(),
            logvar: out.logvar.map(|l| tape.value(l).data().to_vec()),
        })
    }
}
