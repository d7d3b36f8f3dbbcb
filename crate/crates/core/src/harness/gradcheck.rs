use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Tape, Tensor};

/// Denominator floor for relative errors; keeps gradients that are zero
/// up to rounding from dominating the report.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Parameter and flat element holding `max_rel_err`.
    pub worst_path: String,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of the mean cross-entropy against central
/// differences `(L(w+eps) - L(w-eps)) / 2eps` for every entry of every
/// trainable parameter.
pub fn grad_check<M: Network + ?Sized>(
    model: &M,
    inputs: &Tensor,
    labels: &[usize],
    eps: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config("grad_check eps must be positive"));
    }
    let registry = model.registry();
    let ids = registry.trainable_ids();
    if ids.is_empty() {
        return Err(Error::config("model has no trainable parameters"));
    }

    let tape = Tape::new();
    let bound = registry.bind(&tape);
    let loss = model.forward(&tape, &bound, inputs)?.cross_entropy(labels)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(bound.var(id))
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; registry.get(id).tensor().len()])
        })
        .collect();
    drop(tape);

    let loss_with = |id, t: &Tensor| -> Result<f64> {
        let tape = Tape::inference();
        let bound = registry.bind_replacing(&tape, id, t);
        Ok(model.forward(&tape, &bound, inputs)?.cross_entropy(labels)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_path: String::new(),
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    for (&id, grads) in ids.iter().zip(&analytic) {
        let param = registry.get(id);
        let mut probe = param.tensor().clone();
        for (i, &a) in grads.iter().enumerate() {
            let w = probe.data()[i];
            probe.data_mut()[i] = w + eps;
            let up = loss_with(id, &probe)?;
            probe.data_mut()[i] = w - eps;
            let down = loss_with(id, &probe)?;
            probe.data_mut()[i] = w;
            let n = (up - down) / (2.0 * eps);
            let rel = relative_error(a, n);
            report.max_abs_err = report.max_abs_err.max((a - n).abs());
            if rel > report.max_rel_err || report.checked == 0 {
                report.max_rel_err = rel;
                report.worst_path = param.path().to_string();
                report.worst_index = i;
                report.analytic_at_worst = a;
                report.numeric_at_worst = n;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
