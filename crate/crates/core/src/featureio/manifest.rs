//! Line-delimited JSON manifests, one video record per line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One manifest line. Paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub video_id: String,
    pub visual_path: PathBuf,
    #[serde(default)]
    pub audio_path: Option<PathBuf>,
    /// Class indices present in the video; `[0]` for normal videos.
    pub label: Vec<usize>,
    #[serde(default)]
    pub frame_gt_path: Option<PathBuf>,
}

impl VideoRecord {
    pub fn is_anomalous(&self) -> bool {
        self.label.iter().any(|&c| c != 0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<VideoRecord>,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: VideoRecord = serde_json::from_str(line).map_err(|e| {
                Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            if rec.label.is_empty() {
                return Err(Error::Data(format!(
                    "{}:{}: video {} has an empty label",
                    path.display(),
                    lineno + 1,
                    rec.video_id
                )));
            }
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec).map_err(|e| Error::json(path, e))?;
            out.write_all(b"\n").expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
