use crate::error::Result;
use crate::numerics::{ParamStore, Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares reverse-mode gradients of a scalar loss against central
/// differences `(f(w+h) − f(w−h)) / 2h`, one coordinate at a time.
///
/// `loss` must be deterministic: no dropout, fixed inputs. On return the
/// store holds the analytic gradients and its values are unchanged.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, mut loss: F) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    tape.backward(out, store)?;
    drop(tape);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss(&mut tape, store)?;
        Ok(tape.value(v).item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let analytic = store.get(id).grad.data()[i];
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
