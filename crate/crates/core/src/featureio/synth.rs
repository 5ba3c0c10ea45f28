//! Seeded synthetic audio-visual dataset.
//!
//! Every class owns a latent prototype. A frame's latent is its class
//! prototype plus a per-video scene offset plus noise; visual and audio
//! features are independent random projections of that latent plus feature
//! noise. For a configurable fraction of anomalous segments the visual latent
//! uses the normal prototype instead, so only the audio stream reveals them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::avfe::{write_features, write_mask, FeatureSequence, Modality};
use super::manifest::{Manifest, VideoRecord};
use super::VideoSample;
use crate::error::{Error, Result};
use crate::rng::substream;

const LATENT_DIM: usize = 16;
const SCENE_SCALE: f64 = 0.6;
const LATENT_NOISE: f64 = 0.5;
/// Mean share of an anomalous video covered by anomalous segments.
const TYPICAL_COVERAGE: f64 = 0.4;
const MAX_COVERAGE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Filled from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Feature width of both modalities.
    pub dim: usize,
    /// Class names; index 0 is the normal class.
    pub classes: Vec<String>,
    /// Target fraction of anomalous frames in each split.
    pub anomaly_ratio: f64,
    /// Fraction of anomalous segments that are visible in audio only.
    pub audio_only_separable_fraction: f64,
    /// Scale of per-frame latent and feature noise.
    pub noise_scale: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_train: 200,
            n_test: 60,
            dim: 64,
            classes: ["normal", "fighting", "shooting", "explosion"]
                .map(String::from)
                .to_vec(),
            anomaly_ratio: 0.2,
            audio_only_separable_fraction: 0.35,
            noise_scale: 1.0,
            min_len: 16,
            max_len: 48,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("synth.{name} = {v} outside [0, 1]")))
            }
        };
        frac("anomaly_ratio", self.anomaly_ratio)?;
        frac("audio_only_separable_fraction", self.audio_only_separable_fraction)?;
        if self.min_len < 8 || self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "synth lengths must satisfy 8 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.classes.len() < 2 || self.classes.len() > 255 {
            return Err(Error::Config(format!(
                "synth.classes needs 2..=255 entries, got {}",
                self.classes.len()
            )));
        }
        if self.dim == 0 || !(self.noise_scale >= 0.0) {
            return Err(Error::Config("synth.dim must be positive and noise_scale >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub visual: FeatureSequence,
    pub audio: FeatureSequence,
    pub label: Vec<usize>,
    /// Class index of every frame.
    pub frame_gt: Vec<u8>,
}

impl SynthVideo {
    pub fn id(&self) -> &str {
        &self.visual.video_id
    }

    pub fn to_sample(&self, with_gt: bool) -> VideoSample {
        let n = self.visual.n_frames;
        VideoSample {
            id: self.id().to_string(),
            visual: self.visual.to_tensor(),
            audio: Some(self.audio.to_tensor()),
            label: self.label.clone(),
            frame_gt: with_gt.then(|| self.frame_gt.clone()),
            kept: (0..n).collect(),
            n_raw: n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub classes: Vec<String>,
    pub train: Vec<SynthVideo>,
    pub test: Vec<SynthVideo>,
}

impl SynthDataset {
    /// Training samples carry no frame annotations, mirroring weak supervision.
    pub fn train_samples(&self) -> Vec<VideoSample> {
        self.train.iter().map(|v| v.to_sample(false)).collect()
    }

    pub fn test_samples(&self) -> Vec<VideoSample> {
        self.test.iter().map(|v| v.to_sample(true)).collect()
    }
}

struct World {
    prototypes: Vec<Vec<f64>>,
    visual_proj: Vec<f64>,
    audio_proj: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn project(proj: &[f64], latent: &[f64], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            proj[i * LATENT_DIM..(i + 1) * LATENT_DIM]
                .iter()
                .zip(latent)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// Split `total` into `parts` non-negative integers, uniformly over compositions.
fn random_composition(rng: &mut ChaCha8Rng, total: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(0..=total)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

/// Lay out `anomalous` frames of class `class` as 1-3 contiguous segments.
/// Returns the frame mask and the segment spans.
fn plant_segments(
    rng: &mut ChaCha8Rng,
    n: usize,
    anomalous: usize,
    class: u8,
) -> (Vec<u8>, Vec<(usize, usize)>) {
    let max_segments = 3.min(anomalous).min(n - anomalous + 1).max(1);
    let segments = rng.random_range(1..=max_segments);
    // Each segment gets at least one frame; interior gaps at least one frame.
    let lens: Vec<usize> = random_composition(rng, anomalous - segments, segments)
        .into_iter()
        .map(|l| l + 1)
        .collect();
    let free_gap = n - anomalous - (segments - 1);
    let gaps = random_composition(rng, free_gap, segments + 1);
    let mut mask = vec![0u8; n];
    let mut spans = Vec::with_capacity(segments);
    let mut t = gaps[0];
    for (s, &len) in lens.iter().enumerate() {
        mask[t..t + len].fill(class);
        spans.push((t, t + len));
        t += len + gaps[s + 1] + usize::from(s + 1 < segments);
    }
    (mask, spans)
}

fn generate_split(
    cfg: &SynthConfig,
    world: &World,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    count: usize,
) -> Vec<SynthVideo> {
    let lengths: Vec<usize> = (0..count)
        .map(|_| rng.random_range(cfg.min_len..=cfg.max_len))
        .collect();
    let n_anomalous = if cfg.anomaly_ratio > 0.0 {
        ((count as f64 * (cfg.anomaly_ratio / TYPICAL_COVERAGE).min(1.0)).round() as usize)
            .clamp(1, count)
    } else {
        0
    };
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let mut is_anomalous = vec![false; count];
    for &i in &order[..n_anomalous] {
        is_anomalous[i] = true;
    }
    let total_frames: usize = lengths.iter().sum();
    let anomalous_frames: usize = (0..count).filter(|&i| is_anomalous[i]).map(|i| lengths[i]).sum();
    let target = cfg.anomaly_ratio * total_frames as f64;

    let n_classes = cfg.classes.len();
    let mut videos = Vec::with_capacity(count);
    for (v, &n) in lengths.iter().enumerate() {
        let (label, mask, spans) = if is_anomalous[v] {
            let share = target * n as f64 / anomalous_frames as f64;
            let a = (share.round() as usize).clamp(1, ((n as f64) * MAX_COVERAGE) as usize);
            let class = rng.random_range(1..n_classes);
            let (mask, spans) = plant_segments(rng, n, a, class as u8);
            (vec![class], mask, spans)
        } else {
            (vec![0], vec![0u8; n], Vec::new())
        };
        let mut audio_only = vec![false; n];
        for &(s, e) in &spans {
            if rng.random_bool(cfg.audio_only_separable_fraction) {
                audio_only[s..e].fill(true);
            }
        }
        let scene = normal_vec(rng, LATENT_DIM, SCENE_SCALE);
        let mut visual = Vec::with_capacity(n * cfg.dim);
        let mut audio = Vec::with_capacity(n * cfg.dim);
        for t in 0..n {
            let class = mask[t] as usize;
            let eps = normal_vec(rng, LATENT_DIM, LATENT_NOISE * cfg.noise_scale);
            let latent = |proto: &[f64]| -> Vec<f64> {
                proto
                    .iter()
                    .zip(&scene)
                    .zip(&eps)
                    .map(|((p, s), e)| p + s + e)
                    .collect()
            };
            let visual_class = if audio_only[t] { 0 } else { class };
            let lv = latent(&world.prototypes[visual_class]);
            let la = latent(&world.prototypes[class]);
            let fv = project(&world.visual_proj, &lv, cfg.dim);
            let fa = project(&world.audio_proj, &la, cfg.dim);
            let nv = normal_vec(rng, cfg.dim, cfg.noise_scale);
            let na = normal_vec(rng, cfg.dim, cfg.noise_scale);
            visual.extend(fv.iter().zip(&nv).map(|(a, b)| (a + b) as f32));
            audio.extend(fa.iter().zip(&na).map(|(a, b)| (a + b) as f32));
        }
        let id = format!("{prefix}_{v:04}");
        videos.push(SynthVideo {
            visual: FeatureSequence::new(&id, Modality::Visual, n, cfg.dim, visual)
                .expect("finite synthetic features"),
            audio: FeatureSequence::new(&id, Modality::Audio, n, cfg.dim, audio)
                .expect("finite synthetic features"),
            label,
            frame_gt: mask,
        });
    }
    videos
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, "data");
    let proj_scale = 1.0 / (LATENT_DIM as f64).sqrt();
    let world = World {
        prototypes: (0..cfg.classes.len())
            .map(|_| normal_vec(&mut rng, LATENT_DIM, 1.0))
            .collect(),
        visual_proj: normal_vec(&mut rng, cfg.dim * LATENT_DIM, proj_scale),
        audio_proj: normal_vec(&mut rng, cfg.dim * LATENT_DIM, proj_scale),
    };
    let train = generate_split(cfg, &world, &mut rng, "train", cfg.n_train);
    let test = generate_split(cfg, &world, &mut rng, "test", cfg.n_test);
    Ok(SynthDataset {
        classes: cfg.classes.clone(),
        train,
        test,
    })
}

/// Paths written by [`write_dataset`].
#[derive(Clone, Debug)]
pub struct WrittenDataset {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// Write features, masks and manifests under `out_dir`:
/// `features/<id>.{visual,audio}.avfe`, `gt/<id>.avgt` (test split only),
/// `train.jsonl` and `test.jsonl`.
pub fn write_dataset(ds: &SynthDataset, out_dir: &Path) -> Result<WrittenDataset> {
    let features = out_dir.join("features");
    let gt = out_dir.join("gt");
    for dir in [&features, &gt] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let write_split = |videos: &[SynthVideo], name: &str, with_gt: bool| -> Result<PathBuf> {
        let mut records = Vec::with_capacity(videos.len());
        for v in videos {
            let visual_path = PathBuf::from(format!("features/{}.visual.avfe", v.id()));
            let audio_path = PathBuf::from(format!("features/{}.audio.avfe", v.id()));
            write_features(&v.visual, out_dir.join(&visual_path))?;
            write_features(&v.audio, out_dir.join(&audio_path))?;
            let frame_gt_path = if with_gt {
                let p = PathBuf::from(format!("gt/{}.avgt", v.id()));
                write_mask(&v.frame_gt, out_dir.join(&p))?;
                Some(p)
            } else {
                None
            };
            records.push(VideoRecord {
                video_id: v.id().to_string(),
                visual_path,
                audio_path: Some(audio_path),
                label: v.label.clone(),
                frame_gt_path,
            });
        }
        let path = out_dir.join(format!("{name}.jsonl"));
        Manifest {
            root: out_dir.to_path_buf(),
            records,
        }
        .write(&path)?;
        Ok(path)
    };
    let train_manifest = write_split(&ds.train, "train", false)?;
    let test_manifest = write_split(&ds.test, "test", true)?;
    Ok(WrittenDataset {
        train_manifest,
        test_manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            n_train: 30,
            n_test: 10,
            dim: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_ratio_is_all_normal() {
        let ds = synth_generate(&SynthConfig {
            anomaly_ratio: 0.0,
            ..small(1)
        })
        .unwrap();
        for v in ds.train.iter().chain(&ds.test) {
            assert_eq!(v.label, vec![0]);
            assert!(v.frame_gt.iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn labels_match_planted_masks() {
        let ds = synth_generate(&small(3)).unwrap();
        for v in ds.train.iter().chain(&ds.test) {
            let classes: std::collections::BTreeSet<usize> =
                v.frame_gt.iter().filter(|&&c| c != 0).map(|&c| c as usize).collect();
            if v.label == vec![0] {
                assert!(classes.is_empty());
            } else {
                assert_eq!(classes.into_iter().collect::<Vec<_>>(), v.label);
                let runs = v.frame_gt.windows(2).filter(|w| w[0] == 0 && w[1] != 0).count()
                    + usize::from(v.frame_gt[0] != 0);
                assert!((1..=3).contains(&runs), "{runs} segments");
            }
        }
    }

    #[test]
    fn anomaly_frame_fraction_tracks_ratio() {
        for seed in 0..5 {
            let ds = synth_generate(&small(seed)).unwrap();
            let frames: Vec<u8> = ds.train.iter().flat_map(|v| v.frame_gt.clone()).collect();
            let frac = frames.iter().filter(|&&c| c != 0).count() as f64 / frames.len() as f64;
            assert!((frac - 0.2).abs() <= 0.02, "seed {seed}: {frac}");
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = SynthConfig {
            anomaly_ratio: 1.5,
            ..small(0)
        };
        assert!(matches!(synth_generate(&bad), Err(Error::Config(_))));
        let short = SynthConfig {
            min_len: 4,
            ..small(0)
        };
        assert!(synth_generate(&short).is_err());
    }
}
