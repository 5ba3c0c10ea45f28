//! Forward graph of the detector, recorded on a [`Tape`].

use super::params::{Architecture, Bound, ModelConfig};
use crate::diffcore::{Axis, NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Normalization guard for cosine similarities and the global representation.
pub const NORM_EPS: f64 = 1e-8;
/// Masked attention logit; `exp` of it underflows to exactly zero.
const MASKED: f64 = -1e9;

fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn conv(tape: &mut Tape, p: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let k = p.get(&format!("{prefix}.kernel"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let y = tape.conv1d(x, k, 1)?;
    tape.add_row(y, b)
}

/// Additive band mask: 0 where `|i - j| <= window / 2`, a large negative value elsewhere.
pub fn band_mask(n: usize, window: usize) -> Tensor {
    let half = window / 2;
    let data = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i.abs_diff(j) <= half {
                0.0
            } else {
                MASKED
            }
        })
        .collect();
    Tensor::matrix(n, n, data).expect("square mask")
}

/// Single-head local-window self-attention with a residual connection:
/// `X + softmax(mask + X Wq (X Wk)^T / sqrt(a)) X Wv Wo`.
pub fn temporal_encode_visual(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    x: NodeId,
) -> Result<NodeId> {
    let n = tape.value(x).rows();
    let q = tape.matmul(x, p.get("temporal_visual.wq")?)?;
    let k = tape.matmul(x, p.get("temporal_visual.wk")?)?;
    let v = tape.matmul(x, p.get("temporal_visual.wv")?)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.affine(logits, 1.0 / (cfg.attn_dim as f64).sqrt(), 0.0)?;
    let mask = tape.constant(band_mask(n, cfg.attn_window));
    let logits = tape.add(logits, mask)?;
    let attn = tape.softmax(logits, Axis::Cols)?;
    let mixed = tape.matmul(attn, v)?;
    let out = tape.matmul(mixed, p.get("temporal_visual.wo")?)?;
    tape.add(x, out)
}

/// Width-3 temporal convolution with a residual connection.
pub fn temporal_encode_audio(tape: &mut Tape, p: &Bound, x: NodeId) -> Result<NodeId> {
    let y = conv(tape, p, "temporal_audio", x)?;
    tape.add(x, y)
}

/// Gated residual fusion. Returns `(X_av, W)` where
/// `W = sigmoid(Linear([X_a | X_v]))`,
/// `X_res = Linear(GELU(Linear([X_a | X_v])))` and `X_av = X_v + W * X_res`.
pub fn adaptive_fuse(
    tape: &mut Tape,
    p: &Bound,
    xv: NodeId,
    xa: NodeId,
) -> Result<(NodeId, NodeId)> {
    if tape.shape(xv) != tape.shape(xa) {
        return Err(Error::Dimension {
            op: "adaptive_fuse",
            lhs: tape.shape(xv).to_vec(),
            rhs: tape.shape(xa).to_vec(),
        });
    }
    let joint = tape.concat_cols(xa, xv)?;
    let gate = linear(tape, p, "fusion.gate", joint)?;
    let w = tape.sigmoid(gate)?;
    let h = linear(tape, p, "fusion.res1", joint)?;
    let h = tape.gelu(h)?;
    let res = linear(tape, p, "fusion.res2", h)?;
    let gated = tape.mul(w, res)?;
    let x_av = tape.add(xv, gated)?;
    Ok((x_av, w))
}

/// Per-frame anomaly confidence: linear, ReLU, linear, sigmoid. Shape `[N]`.
pub fn classify(tape: &mut Tape, p: &Bound, x: NodeId) -> Result<NodeId> {
    let n = tape.value(x).rows();
    let h = linear(tape, p, "classifier.fc1", x)?;
    let h = tape.relu(h)?;
    let logit = linear(tape, p, "classifier.fc2", h)?;
    let a = tape.sigmoid(logit)?;
    tape.reshape(a, &[n])
}

/// Confidence-weighted video representation: `A^T X` divided by
/// `sum(A) + eps`, then L2-normalized. Shape `[1, d]`.
pub fn global_rep(tape: &mut Tape, a: NodeId, x: NodeId) -> Result<NodeId> {
    let n = tape.value(a).numel();
    if tape.value(x).rows() != n {
        return Err(Error::Dimension {
            op: "global_rep",
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(x).to_vec(),
        });
    }
    let row = tape.reshape(a, &[1, n])?;
    let pooled = tape.matmul(row, x)?;
    let total = tape.sum(a)?;
    let total = tape.affine(total, 1.0, NORM_EPS)?;
    let inv = tape.recip(total)?;
    let pooled = tape.scale_by(pooled, inv)?;
    tape.normalize_rows(pooled, NORM_EPS)
}

/// Class embeddings: frozen label embeddings plus the learnable textual context.
pub fn class_embeddings(tape: &mut Tape, p: &Bound) -> Result<NodeId> {
    tape.add(p.get("class_base")?, p.get("text_prompt")?)
}

/// Instance-specific class embeddings.
///
/// `S_p = softmax(X_c X_p^T / sqrt(d))` over classes; each class row of the
/// prompt is the global representation scaled by its class weight,
/// `X_mp[c] = S_p[c] X_p`; then `X_cp = FFN(X_mp + X_c) + X_c`.
/// Returns `(X_cp, S_p)`.
pub fn av_prompt(tape: &mut Tape, p: &Bound, x_c: NodeId, x_p: NodeId) -> Result<(NodeId, NodeId)> {
    let (c, d) = tape.value(x_c).dims2();
    if tape.shape(x_p) != [1, d] {
        return Err(Error::Dimension {
            op: "av_prompt",
            lhs: vec![c, d],
            rhs: tape.shape(x_p).to_vec(),
        });
    }
    let xpt = tape.transpose(x_p)?;
    let logits = tape.matmul(x_c, xpt)?;
    let logits = tape.affine(logits, 1.0 / (d as f64).sqrt(), 0.0)?;
    let logits = tape.reshape(logits, &[c])?;
    let s_p = tape.softmax(logits, Axis::Cols)?;
    let col = tape.reshape(s_p, &[c, 1])?;
    let x_mp = tape.matmul(col, x_p)?;
    let joint = tape.add(x_mp, x_c)?;
    let h = linear(tape, p, "prompt_ffn.fc1", joint)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, p, "prompt_ffn.fc2", h)?;
    let x_cp = tape.add(h, x_c)?;
    Ok((x_cp, s_p))
}

/// Cosine similarity of every frame with every class embedding. Shape `[N, C]`.
pub fn align_map(tape: &mut Tape, x: NodeId, x_cp: NodeId) -> Result<NodeId> {
    let xn = tape.normalize_rows(x, NORM_EPS)?;
    let cn = tape.normalize_rows(x_cp, NORM_EPS)?;
    let ct = tape.transpose(cn)?;
    tape.matmul(xn, ct)
}

/// Student enhancement: `X + ReLU(conv1d(X))`, kernel 3, padding 1.
pub fn enhance_visual(tape: &mut Tape, p: &Bound, x: NodeId) -> Result<NodeId> {
    let y = conv(tape, p, "enhance", x)?;
    let y = tape.relu(y)?;
    tape.add(x, y)
}

/// Per-frame log-variance from a three-layer convolutional net, clamped to
/// `[-clamp, clamp]`. Shape `[N]`.
pub fn predict_uncertainty(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, x: NodeId) -> Result<NodeId> {
    let n = tape.value(x).rows();
    let h = conv(tape, p, "uncert.conv1", x)?;
    let h = tape.relu(h)?;
    let h = conv(tape, p, "uncert.conv2", h)?;
    let h = tape.relu(h)?;
    let out = conv(tape, p, "uncert.conv3", h)?;
    let out = tape.reshape(out, &[n])?;
    tape.clamp(out, -cfg.logvar_clamp, cfg.logvar_clamp)
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DetectionNodes {
    /// Frame anomaly confidence `[N]`.
    pub a: NodeId,
    /// Alignment map `[N, C]`.
    pub m: NodeId,
    /// Frame features fed to both heads: `X_av` for the teacher, `X_vs` for students.
    pub features: NodeId,
    /// Instance-specific class embeddings `[C, d]`.
    pub x_cp: NodeId,
    /// Fusion gate `W` (teacher only).
    pub gate: Option<NodeId>,
    /// Predicted log-variance `[N]` (students with an uncertainty net).
    pub logvar: Option<NodeId>,
}

/// Full forward pass. `xv`/`xa` must be present as the architecture requires.
pub fn detect(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    arch: Architecture,
    xv: Option<NodeId>,
    xa: Option<NodeId>,
) -> Result<DetectionNodes> {
    let need = |x: Option<NodeId>, what: &str| {
        x.ok_or_else(|| Error::Data(format!("{arch:?} network needs {what} features")))
    };
    let (features, gate, student_in) = match arch {
        Architecture::AudioVisual => {
            let v = temporal_encode_visual(tape, p, cfg, need(xv, "visual")?)?;
            let a = temporal_encode_audio(tape, p, need(xa, "audio")?)?;
            let (x_av, w) = adaptive_fuse(tape, p, v, a)?;
            (x_av, Some(w), None)
        }
        Architecture::Visual => {
            let v = temporal_encode_visual(tape, p, cfg, need(xv, "visual")?)?;
            (enhance_visual(tape, p, v)?, None, Some(v))
        }
        Architecture::Audio => {
            let a = temporal_encode_audio(tape, p, need(xa, "audio")?)?;
            (enhance_visual(tape, p, a)?, None, Some(a))
        }
    };
    let a = classify(tape, p, features)?;
    let x_p = global_rep(tape, a, features)?;
    let x_c = class_embeddings(tape, p)?;
    let (x_cp, _) = av_prompt(tape, p, x_c, x_p)?;
    let m = align_map(tape, features, x_cp)?;
    let logvar = match student_in {
        Some(x) if p.has("uncert.conv3.kernel") => Some(predict_uncertainty(tape, p, cfg, x)?),
        _ => None,
    };
    Ok(DetectionNodes {
        a,
        m,
        features,
        x_cp,
        gate,
        logvar,
    })
}
