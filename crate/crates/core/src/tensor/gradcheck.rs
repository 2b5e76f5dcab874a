use alloc::string::{String, ToString};
use alloc::sync::Arc;

use super::{ParameterStore, Result, Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over entries of `|analytic − numeric| / max(|analytic|, |numeric|, τ)`,
    /// where `τ` is [`RESOLUTION_FACTOR`] times the rounding error of a central
    /// difference, `ε_mach·max(1, |f|)/eps`. Gradients smaller than `τ` are
    /// thereby compared in absolute terms.
    pub max_rel_error: f64,
    /// Max over entries of `|analytic − numeric|`.
    pub max_abs_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Gradients below this many central-difference rounding errors cannot be
/// checked to a relative accuracy of 1e-4.
pub const RESOLUTION_FACTOR: f64 = 1e4;

/// Compares tape adjoints of the scalar `f` against central differences with
/// step `eps`, over every entry of every parameter in `store`.
///
/// The perturbed evaluations replay the branch decisions of the unperturbed
/// one (see [`Tape::replaying`]), so a rectifier or max that would switch
/// inside `±eps` does not masquerade as a gradient error.
pub fn grad_check<F>(f: F, store: &ParameterStore, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParameterStore) -> Result<Var>,
{
    try_grad_check(f, store, eps)
}

/// [`grad_check`] for objectives with their own error type.
pub fn try_grad_check<F, E>(mut f: F, store: &ParameterStore, eps: f64) -> core::result::Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &ParameterStore) -> core::result::Result<Var, E>,
    E: From<TensorError>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::recording();
    let root = f(&mut tape, store)?;
    let branches = Arc::new(tape.take_branches());
    let base = tape.item(root);
    if !base.is_finite() {
        return Err(TensorError::NonFinite {
            name: "<objective>".to_string(),
        }
        .into());
    }
    tape.backward(root)?;
    let analytic = tape.param_grads(store);
    drop(tape);

    let mut eval = |s: &ParameterStore| -> core::result::Result<f64, E> {
        let mut t = Tape::replaying(branches.clone());
        let r = f(&mut t, s)?;
        Ok(t.item(r))
    };

    let floor = RESOLUTION_FACTOR * f64::EPSILON * libm::fabs(base).max(1.0) / eps;
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for id in store.ids() {
        let name = store.name(id);
        let a = analytic.get(id);
        if !a.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite {
                name: name.to_string(),
            }
            .into());
        }
        for j in 0..a.len() {
            let orig = probe.tensor(id).data()[j];
            probe.tensor_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite {
                    name: name.to_string(),
                }
                .into());
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let diff = libm::fabs(a[j] - numeric);
            let err = diff / libm::fabs(a[j]).max(libm::fabs(numeric)).max(floor);
            report.max_abs_error = report.max_abs_error.max(diff);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((name.to_string(), j));
                }
            }
        }
    }
    Ok(report)
}
