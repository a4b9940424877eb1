use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)` so
/// that gradients which are zero up to rounding do not dominate the report.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares tape gradients with central finite differences for every entry of
/// every gradient-requiring parameter in `store`.
///
/// `f` must rebuild the loss deterministically from the store on each call.
pub fn finite_diff_check<F>(mut f: F, store: &mut ParamStore<f64>, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.item(loss))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: None, checked: 0 };
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad()).collect();
    for id in ids {
        let n = store.get(id).numel();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
