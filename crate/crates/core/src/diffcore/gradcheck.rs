use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per input block, in input order.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Blockwise relative error `||a - b|| / (||a|| + ||b|| + 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / (norm(a) + norm(b) + 1e-8)
}

/// Compare reverse-mode gradients of a scalar graph against central finite
/// differences.
///
/// `build` records the graph on a fresh tape given one tracked leaf per entry
/// of `inputs` and returns the scalar root. It is re-run twice per input
/// element, so keep the inputs small.
pub fn gradcheck<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    Ok(check(build, inputs, eps, false)?.expect("kinks are not tracked"))
}

/// Like [`gradcheck`], but returns `None` when any probe lands on a different
/// smooth piece than the base point (see [`Tape::kink_pattern`]), where a
/// central difference is meaningless.
pub fn gradcheck_smooth<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<Option<GradCheckReport>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    check(build, inputs, eps, true)
}

fn check<F>(build: F, inputs: &[Tensor], eps: f64, smooth: bool) -> Result<Option<GradCheckReport>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("gradcheck eps {eps} outside [1e-6, 1e-3]")));
    }
    let eval = |values: &[Tensor]| -> Result<(f64, Vec<usize>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = build(&mut tape, &ids)?;
        let out = tape.value(root);
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "gradcheck root must be scalar, got {:?}",
                out.shape()
            )));
        }
        let pattern = if smooth { tape.kink_pattern() } else { Vec::new() };
        Ok((out.item(), pattern))
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let grads = tape.backward(root)?;
    let base = if smooth { tape.kink_pattern() } else { Vec::new() };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (b, id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(*id, inputs[b].shape());
        let mut numeric = vec![0.0; inputs[b].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[b].data()[i];
            work[b].data_mut()[i] = orig + eps;
            let (up, p_up) = eval(&work)?;
            work[b].data_mut()[i] = orig - eps;
            let (down, p_down) = eval(&work)?;
            work[b].data_mut()[i] = orig;
            if p_up != base || p_down != base {
                return Ok(None);
            }
            *slot = (up - down) / (2.0 * eps);
        }
        per_input.push(relative_error(analytic.data(), &numeric));
    }
    Ok(Some(GradCheckReport { per_input }))
}
