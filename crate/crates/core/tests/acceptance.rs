//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails. Tolerances are fixed below.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use avwatch_core::avmodel::{
    align_map, av_prompt, class_embeddings, classify, decode_checkpoint, encode_checkpoint, global_rep,
    temporal_encode_visual, Architecture, ModelConfig, ModelOptions, ModelParams,
};
use avwatch_core::diffcore::{Tape, Tensor};
use avwatch_core::error::Error;
use avwatch_core::featureio::{
    decode_features, decode_mask, encode_features, encode_mask, synth_generate, FeatureSequence, Modality,
    SynthConfig,
};
use avwatch_core::gradsuite::{run_gradient_suite, GRAD_EPS, GRAD_TOLERANCE};
use avwatch_core::losses::{align_loss, mil_align_scores, nce_from_scores, ukd_loss, LossConfig};
use avwatch_core::metrics::{evaluate_scores, frame_ap, map_at_iou, VideoScores, IOU_THRESHOLDS};
use avwatch_core::rng::substream;
use avwatch_core::trainer::{distill_ukd, ordering_trial, train_model, Dataset, EpochLog, Mode, TrainConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const GRAD_SEEDS: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
/// Floating-point agreement for quantities that are equal in exact arithmetic
/// but summed in a different order.
const REORDER_TOL: f64 = 1e-12;
const VARIANCE_TOL: f64 = 1e-6;
const METRIC_INSTANCES: usize = 200;
const ORDERING_SEEDS: u64 = 10;
const ORDERING_MIN_WINS: usize = 8;
const ORDERING_EPOCHS: usize = 20;
const ORDERING_BUDGET: Duration = Duration::from_secs(600);

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: avwatch_core::error::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn gradient_suite() -> Result<String, String> {
    let started = Instant::now();
    let report = ok(run_gradient_suite(GRAD_SEEDS, None))?;
    let elapsed = started.elapsed();
    let worst = report
        .entries
        .iter()
        .max_by(|a, b| a.worst.total_cmp(&b.worst))
        .ok_or("empty suite")?;
    let failing: Vec<String> = report
        .entries
        .iter()
        .filter(|e| !(e.worst < GRAD_TOLERANCE))
        .map(|e| format!("{} {:.2e}", e.name, e.worst))
        .collect();
    let detail = format!(
        "{} cases x {GRAD_SEEDS} seeds, eps {GRAD_EPS:e}, worst {:.2e} ({}), {:.1}s",
        report.entries.len(),
        worst.worst,
        worst.name,
        elapsed.as_secs_f64()
    );
    ensure(failing.is_empty(), || format!("{detail}; over {GRAD_TOLERANCE:e}: {}", failing.join(", ")))?;
    ensure(elapsed < GRAD_BUDGET, || format!("{detail}; over the {GRAD_BUDGET:?} budget"))?;
    for must in ["teacher_loss", "ukd_student_loss", "matmul", "conv1d", "softmax_rows", "topk_mean"] {
        ensure(report.entries.iter().any(|e| e.name == must), || format!("suite lacks {must}"))?;
    }
    Ok(detail)
}

/// Derivative of the distillation loss with respect to one frame's
/// log-variance, squared error `e`, taken from the tape.
fn ukd_slope(e: f64, logvar: f64) -> f64 {
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::matrix(1, 2, vec![e.sqrt(), 0.0]).unwrap());
    let s = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let lv = tape.leaf(Tensor::vector(vec![logvar]));
    let l = ukd_loss(&mut tape, t, s, lv).unwrap();
    tape.backward(l).unwrap().get(lv).unwrap().item()
}

/// Minimise a convex function on `[lo, hi]` by bisecting the sign of its slope.
fn argmin_convex(slope: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn loss_identities() -> Result<String, String> {
    let mut r = substream(1, "acceptance/losses");

    // Zero log-variance: plain mean squared distance.
    let mut ukd_gap: f64 = 0.0;
    for _ in 0..50 {
        let (n, d) = (r.random_range(1..20), r.random_range(1..12));
        let a = uniform(&mut r, &[n, d], -2.0, 2.0);
        let b = uniform(&mut r, &[n, d], -2.0, 2.0);
        let mut tape = Tape::new();
        let (ta, tb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let lv = tape.constant(Tensor::zeros(&[n]));
        let l = ok(ukd_loss(&mut tape, ta, tb, lv))?;
        let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
        ukd_gap = ukd_gap.max((tape.value(l).item() - mse).abs());
    }
    ensure(ukd_gap <= REORDER_TOL, || format!("ukd(logvar=0) vs MSE differ by {ukd_gap:e}"))?;

    // Focal loss with gamma 0, alpha 1 is cross-entropy, so the alignment loss is NCE.
    let cfg = LossConfig {
        focal_gamma: 0.0,
        focal_alpha: 1.0,
        ..LossConfig::default()
    };
    for _ in 0..50 {
        let (n, c) = (r.random_range(1..40), r.random_range(2..6));
        let m = uniform(&mut r, &[n, c], -1.0, 1.0);
        let k = r.random_range(1..=n);
        let mut targets: Vec<usize> = (0..c).filter(|_| r.random_bool(0.4)).collect();
        if targets.is_empty() {
            targets.push(r.random_range(0..c));
        }
        let mut tape = Tape::new();
        let mm = tape.constant(m);
        let al = ok(align_loss(&mut tape, mm, k, &targets, &cfg))?;
        let s = ok(mil_align_scores(&mut tape, mm, k))?;
        let nce = ok(nce_from_scores(&mut tape, s, cfg.tau, &targets))?;
        let (x, y) = (tape.value(al).item(), tape.value(nce).item());
        ensure(x == y, || format!("align_loss(gamma 0, alpha 1) = {x} but NCE = {y}"))?;
    }

    // Top-k over all N entries is the mean.
    let mut topk_gap: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(1..64);
        let x = uniform(&mut r, &[n], -3.0, 3.0);
        let mut tape = Tape::new();
        let id = tape.constant(x);
        let t = ok(tape.topk_mean(id, n))?;
        let m = ok(tape.mean(id))?;
        topk_gap = topk_gap.max((tape.value(t).item() - tape.value(m).item()).abs());
    }
    ensure(topk_gap <= REORDER_TOL, || format!("topk_mean(N) vs mean differ by {topk_gap:e}"))?;

    // For a fixed error e the loss is minimised at variance e.
    let mut var_gap: f64 = 0.0;
    for e in [0.01, 0.2, 1.0, 3.5, 40.0] {
        let s = argmin_convex(|lv| ukd_slope(e, lv), -9.0, 9.0);
        var_gap = var_gap.max((s.exp() - e).abs());
    }
    ensure(var_gap <= VARIANCE_TOL, || format!("optimal variance off by {var_gap:e}"))?;

    Ok(format!(
        "ukd vs MSE {ukd_gap:.1e}; align==NCE bitwise (50 cases); topk(N) vs mean {topk_gap:.1e}; \
         argmin variance - e {var_gap:.1e}"
    ))
}

/// Model with random non-zero biases and text prompt, so no path is trivially zero.
fn random_model(arch: Architecture, d: usize, c: usize, seed: u64) -> ModelParams {
    let cfg = ModelConfig::resolve(&ModelOptions::default(), d, c).unwrap();
    let mut p = ModelParams::init(cfg, arch, false, seed, None).unwrap();
    let mut r = substream(seed, "acceptance/biases");
    for name in p.trainable_names() {
        if name.ends_with("bias") || name == "text_prompt" {
            let t = p.get_mut(&name).unwrap();
            let shape = t.shape().to_vec();
            let mut v = uniform(&mut r, &shape, -0.5, 0.5);
            v.round_to_f32();
            *t = v;
        }
    }
    p
}

fn ablations() -> Result<String, String> {
    let d = 16;
    for seed in 0..10 {
        let mut r = substream(seed, "acceptance/ablation");
        let n = r.random_range(3..30);
        let xv = uniform(&mut r, &[n, d], -1.0, 1.0);
        let xa = uniform(&mut r, &[n, d], -1.0, 1.0);

        let mut teacher = random_model(Architecture::AudioVisual, d, 4, seed);
        for name in ["fusion.res2.weight", "fusion.res2.bias"] {
            let t = teacher.get_mut(name).unwrap();
            *t = Tensor::zeros(&t.shape().to_vec());
        }
        let fused = ok(teacher.infer(Some(&xv), Some(&xa)))?;
        let mut tape = Tape::new();
        let b = teacher.bind_frozen(&mut tape);
        let x = tape.constant(xv.clone());
        let v = ok(temporal_encode_visual(&mut tape, &b, &teacher.config, x))?;
        let a = ok(classify(&mut tape, &b, v))?;
        let x_p = ok(global_rep(&mut tape, a, v))?;
        let x_c = ok(class_embeddings(&mut tape, &b))?;
        let (x_cp, _) = ok(av_prompt(&mut tape, &b, x_c, x_p))?;
        let m = ok(align_map(&mut tape, v, x_cp))?;
        ensure(&fused.features == tape.value(v), || format!("seed {seed}: fused features differ"))?;
        ensure(fused.a == tape.value(a).data(), || format!("seed {seed}: anomaly scores differ"))?;
        ensure(&fused.m == tape.value(m), || format!("seed {seed}: alignment maps differ"))?;

        let mut prompted = random_model(Architecture::AudioVisual, d, 4, seed + 100);
        for name in ["prompt_ffn.fc2.weight", "prompt_ffn.fc2.bias"] {
            let t = prompted.get_mut(name).unwrap();
            *t = Tensor::zeros(&t.shape().to_vec());
        }
        let out = ok(prompted.infer(Some(&xv), Some(&xa)))?;
        let mut tape = Tape::new();
        let b = prompted.bind_frozen(&mut tape);
        let x_c = ok(class_embeddings(&mut tape, &b))?;
        ensure(&out.x_cp == tape.value(x_c), || format!("seed {seed}: prompted classes differ"))?;
    }
    Ok("fusion-off == visual pathway and FFN-off prompt == class embeddings, bitwise, 10 seeds".into())
}

fn random_video_scores(r: &mut ChaCha8Rng, classes: usize) -> Vec<VideoScores> {
    (0..r.random_range(1..=3))
        .map(|v| {
            let n = r.random_range(4..=100);
            let mut gt = vec![0u8; n];
            for _ in 0..r.random_range(0..=3) {
                let s = r.random_range(0..n);
                let e = r.random_range(s + 1..=n.min(s + 30));
                let c = r.random_range(1..classes) as u8;
                gt[s..e].iter_mut().for_each(|g| *g = c);
            }
            let curves = (0..classes)
                .map(|_| (0..n).map(|_| (r.random_range(0..10) as f64) / 10.0).collect())
                .collect();
            VideoScores {
                id: format!("v{v}"),
                frame_scores: common::tied_scores(r, n),
                class_curves: curves,
                gt: Some(gt),
            }
        })
        .collect()
}

fn metric_oracles() -> Result<String, String> {
    let mut r = substream(2, "acceptance/metrics");
    let mut ap_gap: f64 = 0.0;
    for i in 0..METRIC_INSTANCES {
        let (scores, gt) = common::frame_instance(&mut r);
        let got = ok(frame_ap(&scores, &gt))?.ok_or("no AP with positives")?;
        let want = common::frame_ap_oracle(&scores, &gt).unwrap();
        ap_gap = ap_gap.max((got - want).abs());
        ensure(ap_gap <= REORDER_TOL, || format!("frame instance {i}: {got} vs oracle {want}"))?;
    }
    let mut map_gap: f64 = 0.0;
    for i in 0..METRIC_INSTANCES {
        let (preds, gts) = common::segment_instance(&mut r);
        for &t in &IOU_THRESHOLDS {
            let got = map_at_iou(&preds, &gts, t).1.ok_or("no mAP with ground truth")?;
            let want = common::map_oracle(&preds, &gts, t).unwrap();
            map_gap = map_gap.max((got - want).abs());
            ensure(map_gap <= REORDER_TOL, || format!("segment instance {i} @ {t}: {got} vs oracle {want}"))?;
        }
    }
    let names: Vec<String> = ["normal", "a", "b", "c"].map(String::from).to_vec();
    let mut avg_gap: f64 = 0.0;
    let mut with_segments = 0;
    for _ in 0..METRIC_INSTANCES {
        let videos = random_video_scores(&mut r, names.len());
        let report = ok(evaluate_scores(&videos, &names))?;
        if let (Some(maps), Some(avg)) = (&report.map_per_iou, report.avg_map) {
            with_segments += 1;
            let mean = maps.iter().sum::<f64>() / maps.len() as f64;
            ensure(maps.len() == 5, || "mAP not reported at five IoU thresholds".into())?;
            avg_gap = avg_gap.max((avg - mean).abs());
        }
    }
    ensure(avg_gap <= REORDER_TOL, || format!("AVG vs mean of mAP@IoU differ by {avg_gap:e}"))?;
    ensure(with_segments > METRIC_INSTANCES / 2, || "too few instances with segments".into())?;
    Ok(format!(
        "{METRIC_INSTANCES} frame + {METRIC_INSTANCES}x5 segment instances vs brute force: \
         max |dAP| {ap_gap:.1e}, max |dmAP| {map_gap:.1e}; AVG vs mean {avg_gap:.1e} ({with_segments} reports)"
    ))
}

fn synthetic(seed: u64, cfg: SynthConfig) -> Dataset {
    let ds = synth_generate(&SynthConfig { seed, ..cfg }).unwrap();
    Dataset {
        classes: ds.classes.clone(),
        train: ds.train_samples(),
        test: ds.test_samples(),
    }
}

fn ordering() -> Result<String, String> {
    let started = Instant::now();
    let (mut teacher_wins, mut ukd_wins) = (0, 0);
    let mut lines = Vec::new();
    for seed in 0..ORDERING_SEEDS {
        let data = synthetic(seed, SynthConfig::default());
        let cfg = TrainConfig {
            seed,
            epochs: ORDERING_EPOCHS,
            deterministic: true,
            ..TrainConfig::default()
        };
        let t = ok(ordering_trial(&cfg, &data))?;
        teacher_wins += (t.teacher_ap > t.visual_ap) as usize;
        ukd_wins += (t.ukd_ap > t.visual_ap) as usize;
        lines.push(format!(
            "      seed {seed}: teacher {:.4}  visual {:.4}  ukd {:.4}  margins {:+.4} / {:+.4}",
            t.teacher_ap,
            t.visual_ap,
            t.ukd_ap,
            t.teacher_ap - t.visual_ap,
            t.ukd_ap - t.visual_ap
        ));
    }
    let elapsed = started.elapsed();
    let detail = format!(
        "teacher > visual in {teacher_wins}/{ORDERING_SEEDS}, ukd > visual in {ukd_wins}/{ORDERING_SEEDS} \
         ({ORDERING_EPOCHS} epochs, {:.0}s)\n{}",
        elapsed.as_secs_f64(),
        lines.join("\n")
    );
    ensure(
        teacher_wins >= ORDERING_MIN_WINS && ukd_wins >= ORDERING_MIN_WINS && elapsed < ORDERING_BUDGET,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn determinism() -> Result<String, String> {
    let small = SynthConfig {
        n_train: 32,
        n_test: 12,
        dim: 32,
        ..SynthConfig::default()
    };
    let data = synthetic(11, small);
    let cfg = |mode| TrainConfig {
        seed: 11,
        mode,
        epochs: 3,
        deterministic: true,
        ..TrainConfig::default()
    };
    let quiet = &mut |_: &EpochLog| {};
    let mut runs = Vec::new();
    for _ in 0..2 {
        let teacher = ok(train_model(&cfg(Mode::TeacherAv), &data, None, quiet))?;
        let student = ok(distill_ukd(&cfg(Mode::DistillUkd), &data, &teacher.params, quiet))?;
        runs.push(
            [teacher, student]
                .map(|t| (encode_checkpoint(&t.params), serde_json::to_string(&t.report).unwrap())),
        );
    }
    for (i, what) in ["teacher", "distilled student"].iter().enumerate() {
        ensure(runs[0][i].0 == runs[1][i].0, || format!("{what} checkpoints differ"))?;
        ensure(runs[0][i].1 == runs[1][i].1, || format!("{what} reports differ"))?;
    }
    Ok(format!(
        "teacher ({} B) and distilled student ({} B) checkpoints and reports identical across two runs",
        runs[0][0].0.len(),
        runs[0][1].0.len()
    ))
}

fn file_formats() -> Result<String, String> {
    let path = Path::new("<memory>");
    let mut r = substream(3, "acceptance/formats");
    let mut checked = 0;
    for modality in [Modality::Visual, Modality::Audio, Modality::Scores, Modality::ClassText] {
        let (n, d) = (r.random_range(1..50), r.random_range(1..40));
        let data: Vec<f32> = (0..n * d).map(|_| r.random_range(-1e3f32..1e3)).collect();
        let seq = ok(FeatureSequence::new("vid", modality, n, d, data))?;
        let bytes = encode_features(&seq);
        let back = ok(decode_features(&bytes, "vid", path))?;
        let bitwise = back.data.iter().zip(&seq.data).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(back == seq && bitwise && encode_features(&back) == bytes, || {
            format!("{modality:?} round trip not exact")
        })?;
        let mut corrupt = bytes.clone();
        let i = r.random_range(17..bytes.len() - 4);
        corrupt[i] ^= 0x10;
        ensure(matches!(decode_features(&corrupt, "vid", path), Err(Error::Checksum { .. })), || {
            format!("{modality:?}: flipped payload byte not reported as a checksum error")
        })?;
        for cut in [2, 10, bytes.len() - 1, bytes.len() / 2] {
            ensure(matches!(decode_features(&bytes[..cut], "vid", path), Err(Error::Truncated { .. })), || {
                format!("{modality:?}: {cut}-byte prefix not reported as truncated")
            })?;
        }
        checked += 1;
    }

    let mask: Vec<u8> = (0..97).map(|_| r.random_range(0..4)).collect();
    let bytes = encode_mask(&mask);
    ensure(ok(decode_mask(&bytes, path))? == mask, || "mask round trip".into())?;
    ensure(matches!(decode_mask(&bytes[..bytes.len() - 3], path), Err(Error::Truncated { .. })), || {
        "truncated mask accepted".into()
    })?;

    let cfg = ModelConfig::resolve(&ModelOptions::default(), 16, 4).unwrap();
    let mut ckpts = 0;
    for (arch, unc) in [
        (Architecture::AudioVisual, false),
        (Architecture::Visual, true),
        (Architecture::Audio, false),
    ] {
        let p = ok(ModelParams::init(cfg.clone(), arch, unc, 9, None))?;
        let bytes = encode_checkpoint(&p);
        let back = ok(decode_checkpoint(&bytes, path))?;
        ensure(back == p && encode_checkpoint(&back) == bytes, || format!("{arch:?} checkpoint round trip"))?;
        let mut corrupt = bytes.clone();
        let i = bytes.len() - 40;
        corrupt[i] ^= 0x01;
        ensure(matches!(decode_checkpoint(&corrupt, path), Err(Error::Checksum { .. })), || {
            format!("{arch:?}: corrupted checkpoint not reported as a checksum error")
        })?;
        for cut in [3, 20, bytes.len() - 1] {
            ensure(matches!(decode_checkpoint(&bytes[..cut], path), Err(Error::Truncated { .. })), || {
                format!("{arch:?}: {cut}-byte checkpoint prefix not reported as truncated")
            })?;
        }
        ckpts += 1;
    }
    Ok(format!(
        "{checked} AVFE modalities, mask and {ckpts} checkpoint kinds round-trip bit-exact; \
         corruption -> checksum error, truncation -> truncated error"
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 7] = [
        ("gradient suite", gradient_suite),
        ("loss identities", loss_identities),
        ("ablation reductions", ablations),
        ("metric oracles", metric_oracles),
        ("synthetic ordering", ordering),
        ("determinism", determinism),
        ("file formats", file_formats),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
