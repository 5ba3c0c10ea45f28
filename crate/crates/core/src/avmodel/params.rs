use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::featureio::{read_features, Modality};
use crate::rng::substream;

/// Width overrides from configuration. `None` picks the default derived from `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    /// Classifier hidden width (default `d/4`).
    pub cls_hidden: Option<usize>,
    /// Prompt FFN hidden width (default `d`).
    pub ffn_hidden: Option<usize>,
    /// Fusion residual hidden width (default `d/2`).
    pub res_hidden: Option<usize>,
    /// Uncertainty net hidden width (default `d/4`).
    pub uncert_hidden: Option<usize>,
    /// Attention head width of the visual temporal block (default `d/4`).
    pub attn_dim: Option<usize>,
    /// Local attention window, odd.
    pub attn_window: usize,
    /// Predicted log-variance is clamped to `[-logvar_clamp, logvar_clamp]`.
    pub logvar_clamp: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            cls_hidden: None,
            ffn_hidden: None,
            res_hidden: None,
            uncert_hidden: None,
            attn_dim: None,
            attn_window: 9,
            logvar_clamp: 10.0,
        }
    }
}

/// Fully resolved model dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_classes: usize,
    pub cls_hidden: usize,
    pub ffn_hidden: usize,
    pub res_hidden: usize,
    pub uncert_hidden: usize,
    pub attn_dim: usize,
    pub attn_window: usize,
    pub logvar_clamp: f64,
}

impl ModelConfig {
    pub fn resolve(opts: &ModelOptions, dim: usize, n_classes: usize) -> Result<Self> {
        if dim == 0 || n_classes < 2 {
            return Err(Error::Config(format!(
                "model needs d >= 1 and at least 2 classes, got d={dim}, C={n_classes}"
            )));
        }
        if opts.attn_window % 2 == 0 {
            return Err(Error::Config(format!(
                "model.attn_window must be odd, got {}",
                opts.attn_window
            )));
        }
        if !(opts.logvar_clamp > 0.0) {
            return Err(Error::Config("model.logvar_clamp must be positive".into()));
        }
        let quarter = (dim / 4).max(1);
        let cfg = Self {
            dim,
            n_classes,
            cls_hidden: opts.cls_hidden.unwrap_or(quarter),
            ffn_hidden: opts.ffn_hidden.unwrap_or(dim),
            res_hidden: opts.res_hidden.unwrap_or((dim / 2).max(1)),
            uncert_hidden: opts.uncert_hidden.unwrap_or(quarter),
            attn_dim: opts.attn_dim.unwrap_or(quarter),
            attn_window: opts.attn_window,
            logvar_clamp: opts.logvar_clamp,
        };
        if [cfg.cls_hidden, cfg.ffn_hidden, cfg.res_hidden, cfg.uncert_hidden, cfg.attn_dim]
            .contains(&0)
        {
            return Err(Error::Config("model hidden widths must be positive".into()));
        }
        Ok(cfg)
    }
}

/// Which feature streams the network consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Teacher: both streams, fused.
    AudioVisual,
    /// Visual student with enhancement net.
    Visual,
    /// Audio student mirroring the visual one.
    Audio,
}

impl Architecture {
    pub fn uses_visual(self) -> bool {
        matches!(self, Architecture::AudioVisual | Architecture::Visual)
    }

    pub fn uses_audio(self) -> bool {
        matches!(self, Architecture::AudioVisual | Architecture::Audio)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter set of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub with_uncertainty: bool,
    entries: BTreeMap<String, ParamEntry>,
}

/// Init scheme for one parameter.
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
}

fn param_specs(cfg: &ModelConfig, arch: Architecture, uncertainty: bool) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let c = cfg.n_classes;
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: &str, shape: Vec<usize>, init: Init| specs.push((name.to_string(), shape, init));

    if arch.uses_visual() {
        let a = cfg.attn_dim;
        add("temporal_visual.wq", vec![d, a], Init::FanIn(d));
        add("temporal_visual.wk", vec![d, a], Init::FanIn(d));
        add("temporal_visual.wv", vec![d, a], Init::FanIn(d));
        add("temporal_visual.wo", vec![a, d], Init::FanIn(a));
    }
    if arch.uses_audio() {
        add("temporal_audio.kernel", vec![3, d, d], Init::FanIn(3 * d));
        add("temporal_audio.bias", vec![d], Init::Zeros);
    }
    match arch {
        Architecture::AudioVisual => {
            let h = cfg.res_hidden;
            add("fusion.gate.weight", vec![2 * d, d], Init::FanIn(2 * d));
            add("fusion.gate.bias", vec![d], Init::Zeros);
            add("fusion.res1.weight", vec![2 * d, h], Init::FanIn(2 * d));
            add("fusion.res1.bias", vec![h], Init::Zeros);
            add("fusion.res2.weight", vec![h, d], Init::FanIn(h));
            add("fusion.res2.bias", vec![d], Init::Zeros);
        }
        Architecture::Visual | Architecture::Audio => {
            add("enhance.kernel", vec![3, d, d], Init::FanIn(3 * d));
            add("enhance.bias", vec![d], Init::Zeros);
        }
    }
    let h = cfg.cls_hidden;
    add("classifier.fc1.weight", vec![d, h], Init::FanIn(d));
    add("classifier.fc1.bias", vec![h], Init::Zeros);
    add("classifier.fc2.weight", vec![h, 1], Init::FanIn(h));
    add("classifier.fc2.bias", vec![1], Init::Zeros);
    add("text_prompt", vec![c, d], Init::Zeros);
    let h = cfg.ffn_hidden;
    add("prompt_ffn.fc1.weight", vec![d, h], Init::FanIn(d));
    add("prompt_ffn.fc1.bias", vec![h], Init::Zeros);
    add("prompt_ffn.fc2.weight", vec![h, d], Init::FanIn(h));
    add("prompt_ffn.fc2.bias", vec![d], Init::Zeros);
    if uncertainty {
        let h = cfg.uncert_hidden;
        add("uncert.conv1.kernel", vec![3, d, h], Init::FanIn(3 * d));
        add("uncert.conv1.bias", vec![h], Init::Zeros);
        add("uncert.conv2.kernel", vec![3, h, h], Init::FanIn(3 * h));
        add("uncert.conv2.bias", vec![h], Init::Zeros);
        // Zero output layer: log-variance starts at 0, i.e. unit variance.
        add("uncert.conv3.kernel", vec![3, h, 1], Init::Zeros);
        add("uncert.conv3.bias", vec![1], Init::Zeros);
    }
    specs
}

/// `c` unit-norm, mutually orthogonal rows of width `d` (Gram-Schmidt on Gaussians).
pub fn random_orthogonal_rows(c: usize, d: usize, seed: u64) -> Result<Tensor> {
    if c > d {
        return Err(Error::Config(format!(
            "cannot draw {c} orthogonal class embeddings in {d} dimensions"
        )));
    }
    let mut rng = substream(seed, "init/class_base");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    while rows.len() < c {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut t = Tensor::from_rows(&rows)?;
    t.round_to_f32();
    Ok(t)
}

/// Read frozen class-label embeddings from an AVFE file with the class-text tag.
pub fn load_class_base(path: impl AsRef<Path>) -> Result<Tensor> {
    let seq = read_features(path.as_ref())?;
    if seq.modality != Modality::ClassText {
        return Err(Error::Data(format!(
            "{}: expected class-text features, found {:?}",
            path.as_ref().display(),
            seq.modality
        )));
    }
    Ok(seq.to_tensor())
}

impl ModelParams {
    /// Fresh parameters. Each tensor draws from its own named stream, so the
    /// presence of other parameter groups never changes its initial value.
    pub fn init(
        config: ModelConfig,
        arch: Architecture,
        with_uncertainty: bool,
        seed: u64,
        class_base: Option<Tensor>,
    ) -> Result<Self> {
        let class_base = match class_base {
            Some(t) => {
                if t.shape() != [config.n_classes, config.dim] {
                    return Err(Error::Config(format!(
                        "class embeddings have shape {:?}, model expects [{}, {}]",
                        t.shape(),
                        config.n_classes,
                        config.dim
                    )));
                }
                t
            }
            None => random_orthogonal_rows(config.n_classes, config.dim, seed)?,
        };
        let mut entries = BTreeMap::new();
        entries.insert(
            "class_base".to_string(),
            ParamEntry {
                value: class_base,
                trainable: false,
            },
        );
        for (name, shape, init) in param_specs(&config, arch, with_uncertainty) {
            let mut value = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut rng = substream(seed, &format!("init/{name}"));
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape, data)?
                }
            };
            value.round_to_f32();
            entries.insert(
                name,
                ParamEntry {
                    value,
                    trainable: true,
                },
            );
        }
        Ok(Self {
            config,
            arch,
            with_uncertainty,
            entries,
        })
    }

    pub(crate) fn from_entries(
        config: ModelConfig,
        arch: Architecture,
        with_uncertainty: bool,
        entries: BTreeMap<String, ParamEntry>,
    ) -> Result<Self> {
        let expected = param_specs(&config, arch, with_uncertainty);
        for (name, shape, _) in &expected {
            match entries.get(name) {
                Some(e) if e.value.shape() == shape.as_slice() => {}
                Some(e) => {
                    return Err(Error::Data(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        e.value.shape()
                    )))
                }
                None => return Err(Error::Data(format!("missing parameter {name}"))),
            }
        }
        if !entries.contains_key("class_base") {
            return Err(Error::Data("missing parameter class_base".into()));
        }
        if entries.len() != expected.len() + 1 {
            let extra: Vec<&String> = entries
                .keys()
                .filter(|k| *k != "class_base" && !expected.iter().any(|(n, _, _)| n == *k))
                .collect();
            return Err(Error::Data(format!("unexpected parameters {extra:?}")));
        }
        Ok(Self {
            config,
            arch,
            with_uncertainty,
            entries,
        })
    }

    pub fn entries(&self) -> &BTreeMap<String, ParamEntry> {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    /// Names of trainable tensors in deterministic (sorted) order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|e| e.value.is_finite())
    }

    /// Record every tensor on `tape`: trainable ones as gradient leaves,
    /// frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, true)
    }

    /// Record every tensor as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, track: bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|(name, e)| {
                let id = if track && e.trainable {
                    tape.leaf(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                };
                (name.clone(), id)
            })
            .collect();
        Bound { ids }
    }

    /// Copy the shared head tensors (classifier, prompt FFN, text prompt) from another network.
    pub fn copy_heads_from(&mut self, other: &ModelParams) -> Result<()> {
        let heads: Vec<String> = self
            .entries
            .keys()
            .filter(|n| {
                n.starts_with("classifier.") || n.starts_with("prompt_ffn.") || *n == "text_prompt"
            })
            .cloned()
            .collect();
        for name in heads {
            let src = other
                .get(&name)
                .ok_or_else(|| Error::Config(format!("source network lacks {name}")))?;
            let dst = self.entries.get_mut(&name).expect("listed key");
            if dst.value.shape() != src.shape() {
                return Err(Error::Config(format!(
                    "{name}: shape {:?} vs {:?}",
                    dst.value.shape(),
                    src.shape()
                )));
            }
            dst.value = src.clone();
        }
        Ok(())
    }
}

/// Tape handles of a bound parameter set.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Self {
            ids: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not part of this network")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}
