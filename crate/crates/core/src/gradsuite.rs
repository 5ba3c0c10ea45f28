//! Finite-difference verification of every differentiable operation, each
//! model block, and the complete teacher and distillation objectives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avmodel::{
    adaptive_fuse, align_map, av_prompt, class_embeddings, classify, detect, enhance_visual,
    global_rep, predict_uncertainty, temporal_encode_audio, temporal_encode_visual, Architecture,
    Bound, ModelConfig, ModelOptions, ModelParams,
};
use crate::diffcore::{gradcheck_smooth, Axis, ElementwiseKind, GradCheckReport, NodeId, Tape, Tensor};
use crate::error::Result;
use crate::losses::{
    align_loss, focal, mil_align_scores, nce_from_scores, task_loss, topk_bce, ukd_loss, LossConfig,
};
use crate::rng::substream;

/// Acceptance bound on the blockwise relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_EPS: f64 = 1e-4;

const DIM: usize = 6;
const CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    /// Worst relative error over all seeds and input blocks.
    pub worst: f64,
    pub seeds: usize,
    /// Input draws rejected because a probe crossed a kink.
    pub redraws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub eps: f64,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.worst).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.entries.iter().all(|e| e.worst < GRAD_TOLERANCE)
    }
}

/// `None` means a probe crossed a kink and the inputs must be redrawn.
type Outcome = Result<Option<GradCheckReport>>;
type Case = fn(&mut ChaCha8Rng) -> Outcome;

/// Redraws allowed per seed before a case is reported as failing.
const MAX_REDRAWS: usize = 50;

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("shape")
}

/// Values with magnitude in `[lo, hi]` and random sign, away from kinks at zero.
fn signed(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(lo..hi);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Distinct values spaced at least `gap` apart, in random order.
fn spread(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * gap + r.random_range(0.0..gap / 4.0)).collect();
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        vals.swap(i, j);
    }
    let shift = vals.iter().sum::<f64>() / n as f64;
    Tensor::new(shape.to_vec(), vals.into_iter().map(|v| v - shift).collect()).expect("shape")
}

/// Reduce any node to a scalar with fixed random weights.
fn project(tape: &mut Tape, x: NodeId, weights: &Tensor) -> Result<NodeId> {
    if tape.value(x).numel() == 1 && tape.shape(x).is_empty() {
        return Ok(x);
    }
    let w = tape.constant(weights.clone().reshaped(tape.shape(x).to_vec())?);
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

fn check_op(
    r: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    out_len: usize,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Outcome {
    let w = uniform(r, &[out_len], -1.0, 1.0);
    gradcheck_smooth(
        |t, ids| {
            let y = build(t, ids)?;
            project(t, y, &w)
        },
        &inputs,
        GRAD_EPS,
    )
}

fn elementwise_case(kind: ElementwiseKind, r: &mut ChaCha8Rng) -> Outcome {
    let shape = [3, 4];
    let x = match kind {
        ElementwiseKind::Log | ElementwiseKind::Sqrt | ElementwiseKind::Recip => uniform(r, &shape, 0.5, 2.0),
        ElementwiseKind::Relu => signed(r, &shape, 0.05, 1.5),
        _ => uniform(r, &shape, -1.5, 1.5),
    };
    let mut inputs = vec![x];
    if kind.arity() == 2 {
        inputs.push(uniform(r, &shape, -1.5, 1.5));
    }
    check_op(r, inputs, 12, |t, ids| t.elementwise(kind, ids))
}

/// Model with non-zero biases, prompts and output layers so every path carries gradient.
fn random_model(r: &mut ChaCha8Rng, arch: Architecture, uncertainty: bool) -> Result<ModelParams> {
    let cfg = ModelConfig::resolve(&ModelOptions::default(), DIM, CLASSES)?;
    let seed = r.random();
    let mut p = ModelParams::init(cfg, arch, uncertainty, seed, None)?;
    for name in p.trainable_names() {
        if name.ends_with("bias") || name == "text_prompt" || name.starts_with("uncert.conv3") {
            let t = p.get_mut(&name).expect("listed");
            let shape = t.shape().to_vec();
            *t = uniform(r, &shape, -0.3, 0.3);
        }
    }
    Ok(p)
}

/// Gradient check over `inputs` plus every trainable tensor whose name starts
/// with one of `prefixes`; everything else is bound as a constant.
fn check_block(
    r: &mut ChaCha8Rng,
    params: &ModelParams,
    prefixes: &[&str],
    inputs: Vec<Tensor>,
    out_len: usize,
    build: impl Fn(&mut Tape, &Bound, &[NodeId]) -> Result<NodeId>,
) -> Outcome {
    let selected: Vec<String> = params
        .trainable_names()
        .into_iter()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .collect();
    let fixed: Vec<(String, Tensor)> = params
        .entries()
        .iter()
        .filter(|(n, _)| !selected.contains(n))
        .map(|(n, e)| (n.clone(), e.value.clone()))
        .collect();
    let n_inputs = inputs.len();
    let mut all = inputs;
    all.extend(selected.iter().map(|n| params.get(n).expect("listed").clone()));
    let w = uniform(r, &[out_len.max(1)], -1.0, 1.0);
    gradcheck_smooth(
        |t, ids| {
            let mut pairs: Vec<(String, NodeId)> = selected.iter().cloned().zip(ids[n_inputs..].iter().copied()).collect();
            pairs.extend(fixed.iter().map(|(n, v)| (n.clone(), t.constant(v.clone()))));
            let bound = Bound::from_pairs(pairs);
            let y = build(t, &bound, &ids[..n_inputs])?;
            project(t, y, &w)
        },
        &all,
        GRAD_EPS,
    )
}

/// A two-video weakly labelled batch: one normal, one anomalous.
fn batch(r: &mut ChaCha8Rng) -> Vec<(Tensor, Tensor, Vec<usize>)> {
    vec![
        (uniform(r, &[7, DIM], -1.0, 1.0), uniform(r, &[7, DIM], -1.0, 1.0), vec![0]),
        (uniform(r, &[9, DIM], -1.0, 1.0), uniform(r, &[9, DIM], -1.0, 1.0), vec![2]),
    ]
}

fn full_teacher(r: &mut ChaCha8Rng) -> Outcome {
    let params = random_model(r, Architecture::AudioVisual, false)?;
    let videos = batch(r);
    let loss = LossConfig {
        k_ratio: 0.25,
        ..LossConfig::default()
    };
    check_block(r, &params, &[""], Vec::new(), 1, |t, b, _| {
        let mut terms = Vec::new();
        for (v, a, label) in &videos {
            let xv = t.constant(v.clone());
            let xa = t.constant(a.clone());
            let out = detect(t, b, &params.config, Architecture::AudioVisual, Some(xv), Some(xa))?;
            terms.push(task_loss(t, &out, label, &loss)?.total);
        }
        let s = t.add(terms[0], terms[1])?;
        t.affine(s, 0.5, 0.0)
    })
}

fn full_ukd(r: &mut ChaCha8Rng) -> Outcome {
    let params = random_model(r, Architecture::Visual, true)?;
    let videos = batch(r);
    let teacher: Vec<Tensor> = videos.iter().map(|(v, _, _)| uniform(r, v.shape(), -1.0, 1.0)).collect();
    let loss = LossConfig {
        k_ratio: 0.25,
        ..LossConfig::default()
    };
    check_block(r, &params, &[""], Vec::new(), 1, |t, b, _| {
        let mut terms = Vec::new();
        for ((v, _, label), f) in videos.iter().zip(&teacher) {
            let xv = t.constant(v.clone());
            let out = detect(t, b, &params.config, Architecture::Visual, Some(xv), None)?;
            let task = task_loss(t, &out, label, &loss)?.total;
            let tf = t.constant(f.clone());
            let ukd = ukd_loss(t, tf, out.features, out.logvar.expect("uncertainty net"))?;
            terms.push(t.add(task, ukd)?);
        }
        let s = t.add(terms[0], terms[1])?;
        t.affine(s, 0.5, 0.0)
    })
}

fn cases() -> Vec<(&'static str, Case)> {
    use ElementwiseKind as K;
    vec![
        ("matmul", |r| {
            let a = uniform(r, &[3, 4], -1.0, 1.0);
            let b = uniform(r, &[4, 2], -1.0, 1.0);
            check_op(r, vec![a, b], 6, |t, ids| t.matmul(ids[0], ids[1]))
        }),
        ("transpose", |r| {
            let a = uniform(r, &[3, 4], -1.0, 1.0);
            check_op(r, vec![a], 12, |t, ids| t.transpose(ids[0]))
        }),
        ("reshape", |r| {
            let a = uniform(r, &[3, 4], -1.0, 1.0);
            check_op(r, vec![a], 12, |t, ids| t.reshape(ids[0], &[2, 6]))
        }),
        ("sigmoid", |r| elementwise_case(K::Sigmoid, r)),
        ("gelu", |r| elementwise_case(K::Gelu, r)),
        ("relu", |r| elementwise_case(K::Relu, r)),
        ("log", |r| elementwise_case(K::Log, r)),
        ("exp", |r| elementwise_case(K::Exp, r)),
        ("square", |r| elementwise_case(K::Square, r)),
        ("recip", |r| elementwise_case(K::Recip, r)),
        ("sqrt", |r| elementwise_case(K::Sqrt, r)),
        ("add", |r| elementwise_case(K::Add, r)),
        ("sub", |r| elementwise_case(K::Sub, r)),
        ("mul", |r| elementwise_case(K::Mul, r)),
        ("add_row", |r| {
            let x = uniform(r, &[4, 3], -1.0, 1.0);
            let b = uniform(r, &[3], -1.0, 1.0);
            check_op(r, vec![x, b], 12, |t, ids| t.add_row(ids[0], ids[1]))
        }),
        ("concat_cols", |r| {
            let a = uniform(r, &[4, 3], -1.0, 1.0);
            let b = uniform(r, &[4, 2], -1.0, 1.0);
            check_op(r, vec![a, b], 20, |t, ids| t.concat_cols(ids[0], ids[1]))
        }),
        ("affine", |r| {
            let a = uniform(r, &[5], -1.0, 1.0);
            check_op(r, vec![a], 5, |t, ids| t.affine(ids[0], -1.7, 0.3))
        }),
        ("scale_by", |r| {
            let a = uniform(r, &[2, 3], -1.0, 1.0);
            let s = uniform(r, &[], -2.0, 2.0);
            check_op(r, vec![a, s], 6, |t, ids| t.scale_by(ids[0], ids[1]))
        }),
        ("clamp", |r| {
            let a = signed(r, &[8], 0.05, 0.45);
            let b = signed(r, &[8], 0.55, 1.2);
            let x = Tensor::vector(a.data().iter().chain(b.data()).copied().collect());
            check_op(r, vec![x], 16, |t, ids| t.clamp(ids[0], -0.5, 0.5))
        }),
        ("pow", |r| {
            let a = uniform(r, &[6], 0.3, 2.0);
            check_op(r, vec![a], 6, |t, ids| t.pow(ids[0], 2.5))
        }),
        ("softmax_cols", |r| {
            let a = uniform(r, &[3, 5], -2.0, 2.0);
            check_op(r, vec![a], 15, |t, ids| t.softmax(ids[0], Axis::Cols))
        }),
        ("softmax_rows", |r| {
            let a = uniform(r, &[3, 5], -2.0, 2.0);
            check_op(r, vec![a], 15, |t, ids| t.softmax(ids[0], Axis::Rows))
        }),
        ("conv1d", |r| {
            let x = uniform(r, &[6, 3], -1.0, 1.0);
            let k = uniform(r, &[3, 3, 2], -1.0, 1.0);
            check_op(r, vec![x, k], 12, |t, ids| t.conv1d(ids[0], ids[1], 1))
        }),
        ("topk_mean", |r| {
            let x = spread(r, &[9], 0.1);
            check_op(r, vec![x], 1, |t, ids| t.topk_mean(ids[0], 3))
        }),
        ("topk_mean_columns", |r| {
            let x = spread(r, &[8, 3], 0.05);
            check_op(r, vec![x], 3, |t, ids| t.topk_mean(ids[0], 2))
        }),
        ("sum", |r| {
            let x = uniform(r, &[2, 3], -1.0, 1.0);
            check_op(r, vec![x], 1, |t, ids| t.sum(ids[0]))
        }),
        ("mean", |r| {
            let x = uniform(r, &[2, 3], -1.0, 1.0);
            check_op(r, vec![x], 1, |t, ids| t.mean(ids[0]))
        }),
        ("sum_cols", |r| {
            let x = uniform(r, &[4, 3], -1.0, 1.0);
            check_op(r, vec![x], 4, |t, ids| t.sum_cols(ids[0]))
        }),
        ("normalize_rows", |r| {
            let x = uniform(r, &[4, 3], -1.0, 1.0);
            check_op(r, vec![x], 12, |t, ids| t.normalize_rows(ids[0], 1e-8))
        }),
        ("temporal_encode_visual", |r| {
            let p = random_model(r, Architecture::Visual, false)?;
            let x = uniform(r, &[12, DIM], -1.0, 1.0);
            check_block(r, &p, &["temporal_visual."], vec![x], 12 * DIM, |t, b, ids| {
                temporal_encode_visual(t, b, &p.config, ids[0])
            })
        }),
        ("temporal_encode_audio", |r| {
            let p = random_model(r, Architecture::Audio, false)?;
            let x = uniform(r, &[7, DIM], -1.0, 1.0);
            check_block(r, &p, &["temporal_audio."], vec![x], 7 * DIM, |t, b, ids| {
                temporal_encode_audio(t, b, ids[0])
            })
        }),
        ("adaptive_fuse", |r| {
            let p = random_model(r, Architecture::AudioVisual, false)?;
            let xv = uniform(r, &[5, DIM], -1.0, 1.0);
            let xa = uniform(r, &[5, DIM], -1.0, 1.0);
            check_block(r, &p, &["fusion."], vec![xv, xa], 5 * DIM, |t, b, ids| {
                Ok(adaptive_fuse(t, b, ids[0], ids[1])?.0)
            })
        }),
        ("classify", |r| {
            let p = random_model(r, Architecture::Visual, false)?;
            let x = uniform(r, &[5, DIM], -1.0, 1.0);
            check_block(r, &p, &["classifier."], vec![x], 5, |t, b, ids| classify(t, b, ids[0]))
        }),
        ("global_rep", |r| {
            let a = uniform(r, &[5], 0.05, 0.95);
            let x = uniform(r, &[5, DIM], -1.0, 1.0);
            check_op(r, vec![a, x], DIM, |t, ids| global_rep(t, ids[0], ids[1]))
        }),
        ("av_prompt", |r| {
            let p = random_model(r, Architecture::Visual, false)?;
            let x_p = uniform(r, &[1, DIM], -1.0, 1.0);
            check_block(r, &p, &["prompt_ffn.", "text_prompt"], vec![x_p], CLASSES * DIM, |t, b, ids| {
                let x_c = class_embeddings(t, b)?;
                Ok(av_prompt(t, b, x_c, ids[0])?.0)
            })
        }),
        ("align_map", |r| {
            let x = uniform(r, &[5, DIM], -1.0, 1.0);
            let c = uniform(r, &[CLASSES, DIM], -1.0, 1.0);
            check_op(r, vec![x, c], 5 * CLASSES, |t, ids| align_map(t, ids[0], ids[1]))
        }),
        ("enhance_visual", |r| {
            let p = random_model(r, Architecture::Visual, false)?;
            let x = uniform(r, &[6, DIM], -1.0, 1.0);
            check_block(r, &p, &["enhance."], vec![x], 6 * DIM, |t, b, ids| enhance_visual(t, b, ids[0]))
        }),
        ("predict_uncertainty", |r| {
            let p = random_model(r, Architecture::Visual, true)?;
            let x = uniform(r, &[6, DIM], -1.0, 1.0);
            check_block(r, &p, &["uncert."], vec![x], 6, |t, b, ids| {
                predict_uncertainty(t, b, &p.config, ids[0])
            })
        }),
        ("topk_bce", |r| {
            let a = Tensor::vector(spread(r, &[8], 0.1).data().iter().map(|v| 0.5 + v).collect());
            let y = r.random_bool(0.5);
            check_op(r, vec![a], 1, move |t, ids| topk_bce(t, ids[0], y, 2))
        }),
        ("mil_align_scores", |r| {
            let m = spread(r, &[7, CLASSES], 0.04);
            check_op(r, vec![m], CLASSES, |t, ids| mil_align_scores(t, ids[0], 2))
        }),
        ("nce_from_scores", |r| {
            let s = uniform(r, &[4], -1.0, 1.0);
            check_op(r, vec![s], 1, |t, ids| nce_from_scores(t, ids[0], 0.07, &[1, 3]))
        }),
        ("focal", |r| {
            let s = uniform(r, &[4], -1.0, 1.0);
            check_op(r, vec![s], 1, |t, ids| {
                let p = t.softmax(ids[0], Axis::Cols)?;
                focal(t, p, &[2], 2.0, 0.25)
            })
        }),
        ("align_loss", |r| {
            let m = spread(r, &[8, CLASSES], 0.04);
            check_op(r, vec![m], 1, |t, ids| align_loss(t, ids[0], 2, &[1], &LossConfig::default()))
        }),
        ("ukd_loss", |r| {
            let a = uniform(r, &[5, DIM], -1.0, 1.0);
            let b = uniform(r, &[5, DIM], -1.0, 1.0);
            let l = uniform(r, &[5], -2.0, 2.0);
            check_op(r, vec![a, b, l], 1, |t, ids| ukd_loss(t, ids[0], ids[1], ids[2]))
        }),
        ("teacher_loss", full_teacher),
        ("ukd_student_loss", full_ukd),
    ]
}

/// Run every case for `seeds` seeds. `filter` restricts cases by name substring.
pub fn run_gradient_suite(seeds: usize, filter: Option<&str>) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    for (name, case) in cases() {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let mut worst: f64 = 0.0;
        let mut redraws = 0;
        for seed in 0..seeds as u64 {
            let mut r = substream(seed, &format!("gradcheck/{name}"));
            let mut attempt = 0;
            loop {
                if let Some(report) = case(&mut r)? {
                    worst = worst.max(report.worst());
                    break;
                }
                attempt += 1;
                redraws += 1;
                if attempt > MAX_REDRAWS {
                    worst = f64::INFINITY;
                    break;
                }
            }
        }
        entries.push(SuiteEntry {
            name: name.to_string(),
            worst,
            seeds,
            redraws,
        });
    }
    Ok(SuiteReport {
        eps: GRAD_EPS,
        entries,
    })
}
