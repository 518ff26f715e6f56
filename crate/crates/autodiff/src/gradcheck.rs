//! Central finite-difference checking of tape gradients.

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor for the relative error, so components whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            floor: 1e-6,
            max_entries_per_param: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheck {
    /// Compares backward-pass gradients against central differences of the
    /// scalar built by `build` for every parameter in `store`.
    pub fn run<B>(&self, store: &ParamStore<f64>, build: B) -> Result<GradCheckReport>
    where
        B: Fn(&mut Tape<f64>) -> Result<Var>,
    {
        let analytic = {
            let mut tape = Tape::new(store);
            let loss = build(&mut tape)?;
            tape.backward(loss)?
        };
        let eval = |s: &ParamStore<f64>| -> Result<f64> {
            let mut tape = Tape::new(s);
            let loss = build(&mut tape)?;
            Ok(tape.scalar(loss))
        };

        let mut work = store.clone();
        let mut report = GradCheckReport::default();
        for id in store.ids() {
            let name = store.get(id).name.clone();
            let grad = analytic.get_or_zero(store, id);
            let n = grad.numel();
            let stride = match self.max_entries_per_param {
                Some(m) if m > 0 && n > m => n.div_ceil(m),
                _ => 1,
            };
            for j in (0..n).step_by(stride) {
                let orig = work.value(id).data()[j];
                work.get_mut(id).value.data_mut()[j] = orig + self.step;
                let plus = eval(&work)?;
                work.get_mut(id).value.data_mut()[j] = orig - self.step;
                let minus = eval(&work)?;
                work.get_mut(id).value.data_mut()[j] = orig;

                let numeric = (plus - minus) / (2.0 * self.step);
                let a = grad.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                report.entries_checked += 1;
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = rel;
                    report.worst = Some((name.clone(), j));
                }
            }
        }
        Ok(report)
    }
}
