//! Central finite-difference gradient checking.

use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative error, so entries whose true gradient is
/// zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// False when either perturbed evaluation was NaN or infinite.
    pub finite: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| !e.finite || !(e.rel_error < self.tol))
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare analytic gradients of `f` against central differences with step
/// `eps`. `params` are the inputs `f` receives, in order, with names for
/// the report. At most `per_tensor` evenly spaced entries of each tensor
/// are probed (0 probes all of them).
pub fn grad_check<F>(
    f: F,
    params: &[(String, Tensor)],
    eps: f64,
    tol: f64,
    per_tensor: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("grad_check step must be positive, got {eps}")));
    }
    let leaves: Vec<Tensor> = params.iter().map(|(_, t)| t.detach_with_grad(true)).collect();
    let loss = f(&leaves)?;
    let grads = loss.gradients()?;

    let mut entries = Vec::new();
    for (k, (name, t)) in params.iter().enumerate() {
        let analytic = grads.get(&leaves[k]);
        for index in probe_indices(t.numel(), per_tensor) {
            let eval = |delta: f64| -> Result<f64> {
                let mut inputs: Vec<Tensor> = params.iter().map(|(_, p)| p.detach()).collect();
                let mut data = t.data().to_vec();
                data[index] += delta;
                inputs[k] = Tensor::new(t.shape(), data)?;
                f(&inputs)?.item()
            };
            let plus = eval(eps)?;
            let minus = eval(-eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g[index]);
            let finite = plus.is_finite() && minus.is_finite() && a.is_finite();
            entries.push(GradCheckEntry {
                param: name.clone(),
                index,
                analytic: a,
                numeric,
                rel_error: if finite { relative_error(a, numeric) } else { f64::INFINITY },
                finite,
            });
        }
    }
    Ok(GradCheckReport { tol, entries })
}

fn probe_indices(n: usize, per_tensor: usize) -> Vec<usize> {
    if per_tensor == 0 || per_tensor >= n {
        return (0..n).collect();
    }
    (0..per_tensor).map(|i| i * n / per_tensor).collect()
}
