use super::avfe::FeatureSequence;
use crate::error::{Error, Result};

/// Raw frame indices kept by [`resample`].
///
/// Every `stride`-th frame from index 0 is taken; if that leaves more than
/// `max_len` frames, the list is subsampled to exactly `max_len` entries with
/// position `i` taking element `floor(i * L / max_len)`.
pub fn resample_indices(n: usize, stride: usize, max_len: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Contract("cannot resample an empty sequence".into()));
    }
    if stride == 0 || max_len == 0 {
        return Err(Error::Config(format!(
            "resample needs stride >= 1 and max_len >= 1, got {stride} and {max_len}"
        )));
    }
    let strided: Vec<usize> = (0..n).step_by(stride).collect();
    let l = strided.len();
    if l <= max_len {
        return Ok(strided);
    }
    Ok((0..max_len).map(|i| strided[i * l / max_len]).collect())
}

pub fn resample(seq: &FeatureSequence, stride: usize, max_len: usize) -> Result<FeatureSequence> {
    let idx = resample_indices(seq.n_frames, stride, max_len)?;
    let mut data = Vec::with_capacity(idx.len() * seq.dim);
    for &i in &idx {
        data.extend_from_slice(seq.row(i));
    }
    FeatureSequence::new(seq.video_id.clone(), seq.modality, idx.len(), seq.dim, data)
}

/// For every raw frame, the position of the kept frame that covers it: the
/// last kept index not after the raw frame.
pub fn raw_frame_owner(kept: &[usize], n_raw: usize) -> Vec<usize> {
    let mut owner = Vec::with_capacity(n_raw);
    let mut j = 0;
    for r in 0..n_raw {
        while j + 1 < kept.len() && kept[j + 1] <= r {
            j += 1;
        }
        owner.push(j);
    }
    owner
}
