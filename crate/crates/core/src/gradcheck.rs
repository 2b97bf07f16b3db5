//! Central finite-difference oracle for reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, OP_NAMES};
use crate::model::{EncodedExample, MultiSourceModel};
use crate::params::{Gradients, ParamId, ParamStore};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub param: ParamId,
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    pub coordinates: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `objective`'s reported gradients against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` on every coordinate of every parameter.
///
/// `objective` returns the loss and its reverse-mode gradients. It is
/// evaluated twice at the starting point; differing losses are reported as
/// [`Error::NonDeterministic`]. The store is restored before returning.
pub fn finite_difference_check<F>(store: &mut ParamStore, eps: f64, mut objective: F) -> Result<FdReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    // Written this way so that NaN is rejected too.
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let (first, analytic) = objective(store)?;
    let (second, _) = objective(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let loss_only = |objective: &mut F, store: &ParamStore| objective(store).map(|(l, _)| l);

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: Vec::with_capacity(store.len()),
        coordinates: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let mut param_worst = 0.0f64;
        for index in 0..store.get(id).len() {
            let original = store.get(id).data()[index];
            store.get_mut(id).data_mut()[index] = original + eps;
            let plus = loss_only(&mut objective, store);
            store.get_mut(id).data_mut()[index] = original - eps;
            let minus = loss_only(&mut objective, store);
            store.get_mut(id).data_mut()[index] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.get(id).data()[index];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            param_worst = param_worst.max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Coordinate {
                    param: id,
                    name: store.name(id).to_string(),
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
        report.per_param.push((store.name(id).to_string(), param_worst));
    }
    Ok(report)
}

/// Full-model check of the mean per-token loss over `examples`.
///
/// `faulty_adjoint` names a graph op (see [`crate::graph::OP_NAMES`])
/// whose backward pass is deliberately corrupted; it exists to show the
/// check catches broken adjoints.
pub fn check_model(
    model: &MultiSourceModel,
    examples: &[EncodedExample],
    eps: f64,
    faulty_adjoint: Option<&'static str>,
) -> Result<FdReport> {
    if examples.is_empty() {
        return Err(Error::Empty("gradient check examples"));
    }
    let tokens: usize = examples.iter().map(|e| e.target.len() + 1).sum();
    let scale = 1.0 / tokens as f64;
    let mut store = model.store().clone();
    finite_difference_check(&mut store, eps, |store| {
        let mut total = 0.0;
        let mut grads = Gradients::zeros_like(store);
        for ex in examples {
            let mut g = Graph::new(store).with_faulty_adjoint(faulty_adjoint);
            let (loss, _, _) = model.loss_graph(&mut g, ex)?;
            let scaled = g.scale(loss, scale);
            total += g.value(scaled).item();
            g.backward_into(scaled, &mut grads)?;
        }
        Ok((total, grads))
    })
}

/// Looks up the static name of a graph op.
pub fn op_name(name: &str) -> Option<&'static str> {
    OP_NAMES.iter().copied().find(|&n| n == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::rng::SeededRng;
    use crate::tensor::Tensor;

    fn single(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![x]).unwrap()).unwrap();
        s
    }

    #[test]
    fn cubic_at_two() {
        let mut s = single(2.0);
        let report = finite_difference_check(&mut s, 1e-5, |s| {
            let mut g = Graph::new(s);
            let x = g.param(ParamId(0));
            let x2 = g.mul(x, x)?;
            let x3 = g.mul(x2, x)?;
            Ok((g.value(x3).item(), g.backward(x3)?))
        })
        .unwrap();
        let w = report.worst.unwrap();
        assert!((w.numeric - 12.0).abs() / 12.0 < 1e-6);
        assert!((w.analytic - 12.0).abs() < 1e-12);
        assert_eq!(s.get(ParamId(0)).data(), &[2.0]);
    }

    #[test]
    fn constant_objective() {
        let mut s = single(1.0);
        let report = finite_difference_check(&mut s, 1e-5, |s| {
            let mut g = Graph::new(s);
            let c = g.input(Tensor::scalar(4.0));
            Ok((4.0, g.backward(c)?))
        })
        .unwrap();
        let w = report.worst.unwrap();
        assert_eq!(w.numeric, 0.0);
        assert_eq!(w.analytic, 0.0);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn nondeterminism_detected() {
        let mut s = single(1.0);
        let mut calls = 0.0;
        let err = finite_difference_check(&mut s, 1e-5, |s| {
            calls += 1.0;
            Ok((calls, Gradients::zeros_like(s)))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn rejects_bad_eps() {
        let mut s = single(1.0);
        let r = finite_difference_check(&mut s, 0.0, |s| Ok((0.0, Gradients::zeros_like(s))));
        assert!(r.is_err());
    }

    #[test]
    fn faulty_adjoint_is_caught() {
        let mut rng = SeededRng::new(5);
        let mut s = ParamStore::new();
        s.matrix("w", 3, 3, &mut rng).unwrap();
        s.insert("x", Tensor::vector(vec![0.3, -0.2, 0.9]).unwrap()).unwrap();
        let run = |s: &mut ParamStore, fault| {
            finite_difference_check(s, 1e-5, |s| {
                let mut g = Graph::new(s).with_faulty_adjoint(fault);
                let w = g.param(ParamId(0));
                let x = g.param(ParamId(1));
                let h = g.matvec(w, x)?;
                let t = g.tanh(h);
                let l = g.dot(t, t)?;
                Ok((g.value(l).item(), g.backward(l)?))
            })
            .unwrap()
        };
        assert!(run(&mut s, None).passes(1e-6));
        assert!(!run(&mut s, Some("tanh")).passes(1e-4));
    }
}
