//! Central finite-difference verification of analytic gradients.
//!
//! Runs in f64: perturb each parameter coordinate by +-h, recompute the
//! loss, and compare the quotient against the backward pass. The reported
//! error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.

use crate::error::Result;
use crate::layers::Model;
use crate::tensor::Tensor4;

/// Loss function plugged into the check; returns (loss, grad wrt pred).
pub type LossFn = dyn Fn(&Tensor4<f64>, &Tensor4<f64>) -> Result<(f64, Tensor4<f64>)>;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub max_rel_error: f64,
    /// Coordinate where the maximum occurred.
    pub argmax: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Per-parameter entries, worst first.
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.first().map_or(0.0, |e| e.max_rel_error)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compare analytic parameter gradients of `model` against central finite
/// differences of the scalar loss at `(input, target)`.
pub fn grad_check<M: Model<f64>>(
    model: &mut M,
    input: &Tensor4<f64>,
    target: &Tensor4<f64>,
    loss: &LossFn,
    h: f64,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let pred = model.forward(input, true)?;
    let (_, grad_pred) = loss(&pred, target)?;
    model.backward(&grad_pred)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();

    let mut entries = Vec::new();
    for (pi, (name, analytic_grad)) in analytic.iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut argmax = 0usize;
        for i in 0..analytic_grad.len() {
            let orig = {
                let mut params = model.params();
                let v = params[pi].value[i];
                params[pi].value[i] = v + h;
                v
            };
            let up = loss(&model.forward(input, true)?, target)?.0;
            {
                let mut params = model.params();
                params[pi].value[i] = orig - h;
            }
            let down = loss(&model.forward(input, true)?, target)?.0;
            {
                let mut params = model.params();
                params[pi].value[i] = orig;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic_grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
                argmax = i;
            }
        }
        entries.push(GradCheckEntry {
            param: name.clone(),
            max_rel_error: max_rel,
            argmax,
        });
    }
    entries.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
    Ok(GradCheckReport { entries })
}

/// Also verify the gradient with respect to the input tensor.
pub fn input_grad_check<M: Model<f64>>(
    model: &mut M,
    input: &Tensor4<f64>,
    target: &Tensor4<f64>,
    loss: &LossFn,
    h: f64,
) -> Result<f64> {
    let pred = model.forward(input, true)?;
    let (_, grad_pred) = loss(&pred, target)?;
    let gx = model.backward(&grad_pred)?;
    let mut max_rel = 0.0f64;
    let mut x = input.clone();
    for i in 0..x.data.len() {
        let orig = x.data[i];
        x.data[i] = orig + h;
        let up = loss(&model.forward(&x, true)?, target)?.0;
        x.data[i] = orig - h;
        let down = loss(&model.forward(&x, true)?, target)?.0;
        x.data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = gx.data[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
