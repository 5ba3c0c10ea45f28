//! Optimisation loops for the audio-visual teacher, single-stream students
//! and uncertainty-weighted distillation, plus evaluation and run reports.

mod adam;
mod eval;

pub use adam::Adam;
pub use eval::{
    class_curves, detect_video, evaluate, evaluate_dumps, parse_score_dump, score_dump, streams_for,
};

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avmodel::{detect, Architecture, ModelConfig, ModelOptions, ModelParams};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::featureio::VideoSample;
use crate::losses::{task_loss, ukd_loss, LossConfig};
use crate::metrics::EvalReport;
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TeacherAv,
    StudentVisual,
    StudentAudio,
    DistillUkd,
}

impl Mode {
    pub fn arch(self) -> Architecture {
        match self {
            Mode::TeacherAv => Architecture::AudioVisual,
            Mode::StudentVisual | Mode::DistillUkd => Architecture::Visual,
            Mode::StudentAudio => Architecture::Audio,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::TeacherAv => "teacher_av",
            Mode::StudentVisual => "student_visual",
            Mode::StudentAudio => "student_audio",
            Mode::DistillUkd => "distill_ukd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Filled from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub mode: Mode,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Required by `distill_ukd`.
    pub teacher_checkpoint: Option<PathBuf>,
    /// Start the student's classifier and prompt heads from the teacher's.
    pub copy_teacher_heads: bool,
    /// Worker threads for per-video gradients; 0 uses every core.
    pub threads: usize,
    /// Single-threaded, and wall times left out of reports.
    pub deterministic: bool,
    pub loss: LossConfig,
    pub model: ModelOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            mode: Mode::TeacherAv,
            batch_size: 8,
            learning_rate: 1e-3,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            teacher_checkpoint: None,
            copy_teacher_heads: false,
            threads: 0,
            deterministic: false,
            loss: LossConfig::default(),
            model: ModelOptions::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: batch 96, learning rate 1e-5, 10 epochs (feature width 512).
    pub fn full_scale_preset() -> Self {
        Self {
            batch_size: 96,
            learning_rate: 1e-5,
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{key} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "train.adam_eps must be positive and train.weight_decay non-negative".into(),
            ));
        }
        self.loss.validate()
    }

    fn worker_threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads
        }
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub bce: f64,
    pub align: f64,
    pub ukd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub config: TrainConfig,
    pub seed: u64,
    pub optimizer: String,
    /// Trainable parameters of the trained network; frozen tensors and the teacher are excluded.
    pub trainable_params: usize,
    /// Mean training loss at initialisation.
    pub initial_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub final_eval: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

impl RunReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total)
    }
}

/// In-memory split with class names.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

impl Dataset {
    fn dim(&self) -> Result<usize> {
        self.train
            .first()
            .or(self.test.first())
            .map(|s| s.visual.cols())
            .ok_or_else(|| Error::Data("dataset has no videos".into()))
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ModelParams,
    pub report: RunReport,
}

#[derive(Clone, Copy, Default)]
struct Parts {
    total: f64,
    bce: f64,
    align: f64,
    ukd: f64,
}

struct Job<'a> {
    cfg: &'a TrainConfig,
    names: Vec<String>,
    /// Teacher features of every training video, for distillation.
    teacher_features: Option<Vec<Tensor>>,
}

impl Job<'_> {
    /// Loss parts and, when `with_grads`, gradients aligned with `names`.
    fn video(&self, params: &ModelParams, sample: &VideoSample, index: usize, with_grads: bool) -> Result<(Parts, Vec<Tensor>)> {
        let arch = params.arch;
        let mut tape = Tape::new();
        let bound = if with_grads { params.bind(&mut tape) } else { params.bind_frozen(&mut tape) };
        let xv = arch.uses_visual().then(|| tape.constant(sample.visual.clone()));
        let xa = match (arch.uses_audio(), &sample.audio) {
            (true, Some(a)) => Some(tape.constant(a.clone())),
            (true, None) => {
                return Err(Error::Data(format!("video {}: audio features missing", sample.id)))
            }
            (false, _) => None,
        };
        let out = detect(&mut tape, &bound, &params.config, arch, xv, xa)?;
        let lc = &self.cfg.loss;
        let task = task_loss(&mut tape, &out, &sample.label, lc)?;
        let mut parts = Parts {
            total: 0.0,
            bce: tape.value(task.bce).item(),
            align: tape.value(task.align).item(),
            ukd: 0.0,
        };
        let root = match &self.teacher_features {
            None => task.total,
            Some(feats) => {
                let task_term = tape.affine(task.total, lc.task_w, 0.0)?;
                if lc.ukd_w == 0.0 {
                    task_term
                } else {
                    let logvar = out
                        .logvar
                        .ok_or_else(|| Error::Contract("distillation student lacks an uncertainty net".into()))?;
                    let teacher = tape.constant(feats[index].clone());
                    let ukd = ukd_loss(&mut tape, teacher, out.features, logvar)?;
                    parts.ukd = tape.value(ukd).item();
                    let ukd_term = tape.affine(ukd, lc.ukd_w, 0.0)?;
                    tape.add(task_term, ukd_term)?
                }
            }
        };
        parts.total = tape.value(root).item();
        if !parts.total.is_finite() {
            return Err(Error::Numeric {
                op: "train",
                detail: format!("non-finite loss on video {}", sample.id),
            });
        }
        if !with_grads {
            return Ok((parts, Vec::new()));
        }
        let mut grads = tape.backward(root)?;
        let mut out_grads = Vec::with_capacity(self.names.len());
        for name in &self.names {
            let id = bound.get(name)?;
            let shape = params.get(name).expect("bound name").shape();
            out_grads.push(grads.take(id).unwrap_or_else(|| Tensor::zeros(shape)));
        }
        Ok((parts, out_grads))
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

fn optimise(
    cfg: &TrainConfig,
    data: &Dataset,
    mut params: ModelParams,
    teacher_features: Option<Vec<Tensor>>,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<Trained> {
    let started = Instant::now();
    let job = Job {
        cfg,
        names: params.trainable_names(),
        teacher_features,
    };
    let workers = pool(cfg.worker_threads())?;
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let n = data.train.len();
    if n == 0 {
        return Err(Error::Data("training split is empty".into()));
    }

    let initial: Vec<Parts> = workers.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| job.video(&params, &data.train[i], i, false).map(|r| r.0))
            .collect::<Result<Vec<_>>>()
    })?;
    let initial_loss = initial.iter().map(|p| p.total).sum::<f64>() / n as f64;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(cfg.seed, &format!("shuffle/{epoch}")));
        let mut sums = Parts::default();
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(Parts, Vec<Tensor>)> = workers.install(|| {
                batch
                    .par_iter()
                    .map(|&i| job.video(&params, &data.train[i], i, true))
                    .collect::<Result<Vec<_>>>()
            })?;
            let scale = 1.0 / batch.len() as f64;
            let mut total: Vec<Tensor> = job
                .names
                .iter()
                .map(|name| Tensor::zeros(params.get(name).expect("trainable").shape()))
                .collect();
            for (parts, grads) in &results {
                sums.total += parts.total;
                sums.bce += parts.bce;
                sums.align += parts.align;
                sums.ukd += parts.ukd;
                for (acc, g) in total.iter_mut().zip(grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            for g in &mut total {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            adam.step(&mut params, &job.names, &total)?;
        }
        let log = EpochLog {
            epoch,
            total: sums.total / n as f64,
            bce: sums.bce / n as f64,
            align: sums.align / n as f64,
            ukd: job.teacher_features.as_ref().map(|_| sums.ukd / n as f64),
            wall_time_s: (!cfg.deterministic).then(|| started.elapsed().as_secs_f64()),
        };
        log::info!(
            "{} epoch {}/{}: loss {:.6} (bce {:.6}, align {:.6}{}){}",
            cfg.mode.name(),
            epoch,
            cfg.epochs,
            log.total,
            log.bce,
            log.align,
            log.ukd.map(|u| format!(", ukd {u:.6}")).unwrap_or_default(),
            log.wall_time_s.map(|t| format!(" {t:.1}s")).unwrap_or_default()
        );
        progress(&log);
        epochs.push(log);
    }

    let final_eval = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&params, &data.test, &data.classes, cfg.loss.tau)?)
    };
    let report = RunReport {
        mode: cfg.mode,
        config: cfg.clone(),
        seed: cfg.seed,
        optimizer: format!(
            "adam(beta1={}, beta2={}, eps={}, weight_decay={})",
            cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay
        ),
        trainable_params: params.trainable_count(),
        initial_loss,
        epochs,
        final_eval,
        wall_time_s: (!cfg.deterministic).then(|| started.elapsed().as_secs_f64()),
    };
    Ok(Trained { params, report })
}

fn init_params(cfg: &TrainConfig, data: &Dataset, class_base: Option<Tensor>) -> Result<ModelParams> {
    let model = ModelConfig::resolve(&cfg.model, data.dim()?, data.classes.len())?;
    ModelParams::init(
        model,
        cfg.mode.arch(),
        cfg.mode == Mode::DistillUkd,
        cfg.seed,
        class_base,
    )
}

/// Train the teacher or a single-stream student from scratch, as `cfg.mode` says.
/// Without `class_base`, class embeddings are drawn from the run seed.
pub fn train_model(
    cfg: &TrainConfig,
    data: &Dataset,
    class_base: Option<Tensor>,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<Trained> {
    cfg.validate()?;
    if cfg.mode == Mode::DistillUkd {
        return Err(Error::Config("distill_ukd needs a teacher; use distill_ukd()".into()));
    }
    let params = init_params(cfg, data, class_base)?;
    optimise(cfg, data, params, None, progress)
}

/// Train a visual student against a frozen audio-visual teacher. The student
/// takes the teacher's class embeddings.
pub fn distill_ukd(
    cfg: &TrainConfig,
    data: &Dataset,
    teacher: &ModelParams,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<Trained> {
    cfg.validate()?;
    if cfg.mode != Mode::DistillUkd {
        return Err(Error::Config(format!("distill_ukd called with mode {}", cfg.mode.name())));
    }
    if teacher.arch != Architecture::AudioVisual {
        return Err(Error::Config(format!(
            "teacher must be an audio-visual network, checkpoint holds {:?}",
            teacher.arch
        )));
    }
    let dim = data.dim()?;
    if teacher.config.dim != dim {
        return Err(Error::Config(format!(
            "teacher feature width {} differs from the data width {dim}",
            teacher.config.dim
        )));
    }
    if teacher.config.n_classes != data.classes.len() {
        return Err(Error::Config(format!(
            "teacher has {} classes, data has {}",
            teacher.config.n_classes,
            data.classes.len()
        )));
    }
    let class_base = teacher.get("class_base").cloned();
    let mut params = init_params(cfg, data, class_base)?;
    if cfg.copy_teacher_heads {
        params.copy_heads_from(teacher)?;
    }
    let workers = pool(cfg.worker_threads())?;
    let feats = workers.install(|| {
        data.train
            .par_iter()
            .map(|s| detect_video(teacher, s).map(|o| o.features))
            .collect::<Result<Vec<_>>>()
    })?;
    optimise(cfg, data, params, Some(feats), progress)
}

/// Frame AP of the three networks compared by the ordering experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingTrial {
    pub seed: u64,
    pub teacher_ap: f64,
    pub visual_ap: f64,
    pub ukd_ap: f64,
}

/// Train a teacher, a visual student and a distilled student on one dataset
/// and report their test frame AP.
pub fn ordering_trial(cfg: &TrainConfig, data: &Dataset) -> Result<OrderingTrial> {
    let ap = |t: &Trained| -> Result<f64> {
        t.report
            .final_eval
            .as_ref()
            .and_then(|e| e.frame_ap)
            .ok_or_else(|| Error::Data("test split has no anomalous frames".into()))
    };
    let mut quiet = |_: &EpochLog| {};
    let teacher = train_model(&TrainConfig { mode: Mode::TeacherAv, ..cfg.clone() }, data, None, &mut quiet)?;
    let visual = train_model(&TrainConfig { mode: Mode::StudentVisual, ..cfg.clone() }, data, None, &mut quiet)?;
    let ukd = distill_ukd(
        &TrainConfig { mode: Mode::DistillUkd, ..cfg.clone() },
        data,
        &teacher.params,
        &mut quiet,
    )?;
    Ok(OrderingTrial {
        seed: cfg.seed,
        teacher_ap: ap(&teacher)?,
        visual_ap: ap(&visual)?,
        ukd_ap: ap(&ukd)?,
    })
}
