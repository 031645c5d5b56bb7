//! Central-difference gradient checking against [`Tape::backward`].
//!
//! The numeric derivative is the Richardson combination of central
//! differences at steps `eps` and `eps / 2`, which cancels the `eps^2`
//! truncation term. Entries whose probe interval crosses a kink (a ReLU
//! sign flip, a new max-pool winner, a clamp boundary) are not
//! differentiable there; they are detected from the tape's branch signature
//! and counted as skipped rather than compared.

use alloc::string::String;

use crate::autodiff::{Mode, Tape, Var};
use crate::batch::ClipBatch;
use crate::error::{Error, Result};
use crate::fusion::M2P2Model;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Entries whose probe interval crossed a kink.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Multiplies analytic gradients by `1 + corrupt`; fault injection for tests.
    pub corrupt: Option<f64>,
}

impl GradCheckOptions {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradCheckOptions { eps, tol, corrupt: None }
    }
}

/// Relative error `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares backward gradients of `loss_fn` with central differences for
/// every entry of every parameter in `store`. Always runs in eval mode.
pub fn grad_check<F>(store: &ParamStore, loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(opts.eps > 0.0 && opts.eps <= 1e-2) {
        return Err(Error::invalid(alloc::format!("eps {} outside (0, 1e-2]", opts.eps)));
    }
    let analytic = {
        let mut tape = Tape::new(store, Mode::Eval);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new(s, Mode::Eval);
        let loss = loss_fn(&mut tape)?;
        Ok((tape.value(loss).data()[0], tape.branch_signature()))
    };
    let (_, base_sig) = eval(store)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            let mut at = |delta: f64| -> Result<(f64, u64)> {
                probe.get_mut(id).data_mut()[i] = orig + delta;
                let r = eval(&probe);
                probe.get_mut(id).data_mut()[i] = orig;
                r
            };
            let h = opts.eps;
            let probes = [at(h)?, at(-h)?, at(h / 2.0)?, at(-h / 2.0)?];
            if probes.iter().any(|&(_, sig)| sig != base_sig) {
                report.skipped += 1;
                continue;
            }
            let wide = (probes[0].0 - probes[1].0) / (2.0 * h);
            let narrow = (probes[2].0 - probes[3].0) / h;
            let numeric = (4.0 * narrow - wide) / 3.0;
            let mut a = analytic.param(id).data()[i];
            if let Some(c) = opts.corrupt {
                a *= 1.0 + c;
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = alloc::format!("{}[{i}]", store.name(id));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err < opts.tol;
    Ok(report)
}

/// Checks the total training loss of `model` on `batch` with fixed
/// modality weights.
pub fn model_grad_check(
    model: &M2P2Model,
    batch: &ClipBatch,
    weights: [f64; 3],
    gamma: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    grad_check(
        &model.params,
        |tape: &mut Tape<'_>| {
            let out = model.forward(tape, batch, weights)?;
            Ok(model.loss(tape, &out, batch, gamma)?.total)
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(alloc::vec![0.3, -1.2, 2.0]).unwrap());
        s
    }

    fn quadratic(t: &mut Tape<'_>) -> Result<Var> {
        let x = t.param(crate::params::ParamId(0));
        let sq = t.mul(x, x)?;
        let s = t.sum_all(sq)?;
        t.scale(s, 0.5)
    }

    #[test]
    fn quadratic_passes_tightly() {
        let r = grad_check(&quadratic_store(), quadratic, GradCheckOptions::new(1e-4, 1e-6)).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_err < 1e-6);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn corrupted_gradient_fails_and_names_param() {
        let mut opts = GradCheckOptions::new(1e-4, 1e-4);
        opts.corrupt = Some(0.1);
        let r = grad_check(&quadratic_store(), quadratic, opts).unwrap();
        assert!(!r.passed);
        assert!(r.worst_param.starts_with("x["), "{}", r.worst_param);
        assert!((r.max_rel_err - 0.1 / 1.1).abs() < 1e-6);
    }

    #[test]
    fn kink_inside_probe_interval_is_skipped() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(alloc::vec![1e-4, 0.5, -0.5]).unwrap());
        let relu_sum = |t: &mut Tape<'_>| {
            let x = t.param(crate::params::ParamId(0));
            let r = t.relu(x)?;
            t.sum_all(r)
        };
        let r = grad_check(&s, relu_sum, GradCheckOptions::new(1e-3, 1e-4)).unwrap();
        assert_eq!((r.checked, r.skipped), (2, 1));
        assert!(r.passed);
    }

    #[test]
    fn richardson_handles_small_gradients() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(alloc::vec![3e-3, 0.1]).unwrap());
        // d/dx x^4 / 4 = x^3 = 2.7e-8 at the first entry
        let quartic = |t: &mut Tape<'_>| {
            let x = t.param(crate::params::ParamId(0));
            let sq = t.mul(x, x)?;
            let q = t.mul(sq, sq)?;
            let s = t.sum_all(q)?;
            t.scale(s, 0.25)
        };
        let r = grad_check(&s, quartic, GradCheckOptions::new(1e-3, 1e-4)).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn rejects_out_of_range_eps() {
        assert!(grad_check(&quadratic_store(), quadratic, GradCheckOptions::new(0.1, 1e-4)).is_err());
        assert!(grad_check(&quadratic_store(), quadratic, GradCheckOptions::new(0.0, 1e-4)).is_err());
    }
}
