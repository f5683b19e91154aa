//! Central finite-difference checking of tape gradients.
//!
//! Every scalar of every parameter in the store and of every input matrix is
//! perturbed by `±h`; the numerical derivative is compared with the
//! analytic one using `|a - n| <= atol + rtol * max(|a|, |n|)`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-4, rtol: 1e-4, atol: 1e-7 }
    }
}

impl GradCheck {
    pub fn with_rtol(rtol: f64) -> Self {
        GradCheck { rtol, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub location: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest `|a - n| / max(|a|, |n|)` among entries with magnitude above `atol`.
    pub max_rel_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }
}

fn eval<F>(store: &ParamStore, inputs: &[Matrix], f: &F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).sum()
}

/// `f` must be deterministic: any randomness has to be fixed outside it.
pub fn check_gradients<F>(store: &ParamStore, inputs: &[Matrix], cfg: GradCheck, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|m| tape.constant(m.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let param_grads = grads.params(&tape);

    let mut report = GradCheckReport::default();
    let compare = |location: &dyn Fn() -> String, analytic: f64, numeric: f64, report: &mut GradCheckReport| {
        report.checked += 1;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale > cfg.atol {
            report.max_rel_error = report.max_rel_error.max(diff / scale);
        }
        if !(diff <= cfg.atol + cfg.rtol * scale) {
            report.mismatches.push(Mismatch { location: location(), analytic, numeric });
        }
    };

    let mut work = store.clone();
    for id in store.ids() {
        let n = store.get(id).len();
        for k in 0..n {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + cfg.step;
            let plus = eval(&work, inputs, &f);
            work.get_mut(id).data_mut()[k] = orig - cfg.step;
            let minus = eval(&work, inputs, &f);
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = param_grads.get(id).map_or(0.0, |g| g.data()[k]);
            compare(&|| alloc::format!("{}[{k}]", store.name(id)), analytic, numeric, &mut report);
        }
    }

    let mut perturbed: Vec<Matrix> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let orig = input.data()[k];
            perturbed[i].data_mut()[k] = orig + cfg.step;
            let plus = eval(store, &perturbed, &f);
            perturbed[i].data_mut()[k] = orig - cfg.step;
            let minus = eval(store, &perturbed, &f);
            perturbed[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = grads.wrt(vars[i]).map_or(0.0, |g| g.data()[k]);
            compare(&|| alloc::format!("input{i}[{k}]"), analytic, numeric, &mut report);
        }
    }
    report
}
