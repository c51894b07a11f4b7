//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker treats the loss builder as a black box: it reads analytic
//! gradients from one taped backward pass, then re-evaluates the loss twice
//! per scalar with +/- h perturbations. The numeric side never touches the
//! backward code, so it stays an independent oracle for it.

mod suite;

pub use suite::{full_model_check, full_suite, model_suite, op_suite};

use crate::error::Result;
use crate::params::Params;
use crate::tape::{Tape, Var};

/// Finite-difference step and acceptance threshold.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckSettings {
    pub h: f64,
    pub tol_rel: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        // h pinned for 64-bit central differences; rel tolerance 1e-4.
        GradCheckSettings { h: 1e-5, tol_rel: 1e-4 }
    }
}

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

impl GradCheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<28} max_rel_err={:.3e} ({} partials)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.checked
        )
    }
}

/// Relative error with an absolute floor, so near-zero gradient pairs whose
/// difference is pure FD noise do not divide to garbage.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Check d(loss)/d(entry) for every trainable entry of `params` against
/// central differences. `build_loss` must rebuild the same scalar loss from
/// the current parameter values on every call.
pub fn check_params<F>(
    name: &str,
    params: &mut Params,
    settings: GradCheckSettings,
    mut build_loss: F,
) -> Result<GradCheckResult>
where
    F: FnMut(&mut Tape, &mut Params) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, params)?;
    tape.backward(loss)?;
    let analytic = tape.param_grads(params);
    drop(tape);

    let ids: Vec<_> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for id in ids {
        let n = params.value(id).len();
        for i in 0..n {
            let orig = params.value(id).data()[i];

            params.value_mut(id).data_mut()[i] = orig + settings.h;
            let mut t = Tape::new();
            let lp = build_loss(&mut t, params)?;
            let loss_plus = t.value(lp).item();
            drop(t);

            params.value_mut(id).data_mut()[i] = orig - settings.h;
            let mut t = Tape::new();
            let lm = build_loss(&mut t, params)?;
            let loss_minus = t.value(lm).item();
            drop(t);

            params.value_mut(id).data_mut()[i] = orig;

            let numeric = (loss_plus - loss_minus) / (2.0 * settings.h);
            let a = analytic[id.index()]
                .as_ref()
                .map_or(0.0, |g| g[i]);
            max_rel = max_rel.max(rel_err(a, numeric));
            checked += 1;
        }
    }

    Ok(GradCheckResult {
        name: name.to_string(),
        max_rel_err: max_rel,
        checked,
        passed: max_rel < settings.tol_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_loss_passes() {
        // loss = sum(w * w): d/dw = 2w
        let mut params = Params::new();
        params
            .insert("w", Tensor::from_vec(vec![0.3, -1.2, 2.0]), true)
            .unwrap();
        let res = check_params("quadratic", &mut params, GradCheckSettings::default(), |tape, p| {
            let w = tape.bind(p, p.id("w").unwrap());
            let sq = tape.mul(w, w)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(res.passed, "{}", res.line());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // loss uses w twice but we sabotage by binding only one use to the
        // tape-visible parameter: grad misses half the contribution.
        let mut params = Params::new();
        params.insert("w", Tensor::from_vec(vec![1.5]), true).unwrap();
        let res = check_params("sabotaged", &mut params, GradCheckSettings::default(), |tape, p| {
            let w = tape.bind(p, p.id("w").unwrap());
            let frozen = tape.leaf(p.value(p.id("w").unwrap()).clone());
            let prod = tape.mul(w, frozen)?;
            Ok(tape.sum_all(prod))
        })
        .unwrap();
        assert!(!res.passed, "sabotaged check unexpectedly passed: {}", res.line());
    }
}
