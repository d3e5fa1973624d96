use crate::error::{Error, Result};
use crate::ndtensor::{ParamId, ParamStore, Tape, Var};

/// Default step of the five-point central stencil. Smaller steps let
/// round-off in an O(1) objective swamp gradients of order 1e-9.
pub const DEFAULT_STEP: f64 = 3e-3;

const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Coordinate index (row-major) of the worst error.
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a relu/clamp kink.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compare tape gradients of the scalar built by `f` against the fourth-order
/// central difference
/// `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`
/// for every coordinate of every parameter in `store`. Coordinates whose
/// perturbations move any relu/clamp/floor across its kink are skipped.
pub fn grad_check<F>(store: &mut ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_params(store, &ids, step, f)
}

/// As [`grad_check`], restricted to `ids`.
pub fn grad_check_params<F>(store: &mut ParamStore, ids: &[ParamId], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<(f64, crate::ndtensor::KinkPattern)> {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::structural("gradient check needs a scalar objective"));
        }
        Ok((v.item(), tape.kink_pattern()))
    };

    let analytic = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    let (base, base_kinks) = eval(store)?;
    let (again, _) = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::protocol(format!("objective is not deterministic: {base} then {again}")));
    }

    let mut report = GradCheckReport { params: Vec::with_capacity(ids.len()) };
    for &id in ids {
        let n = store.get(id).value.len();
        let grad = analytic.param(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut check =
            ParamCheck { name: store.get(id).name.clone(), max_rel_error: 0.0, worst_index: 0, checked: 0, skipped: 0 };
        for (k, &g) in grad.iter().enumerate() {
            let orig = store.get(id).value.data()[k];
            let mut probe = |offset: f64| {
                store.get_mut(id).value.data_mut()[k] = orig + offset;
                let r = eval(store);
                store.get_mut(id).value.data_mut()[k] = orig;
                r
            };
            let (p1, m1, p2, m2) = (probe(step), probe(-step), probe(2.0 * step), probe(-2.0 * step));
            let ((fp1, k1), (fm1, k2), (fp2, k3), (fm2, k4)) = (p1?, m1?, p2?, m2?);
            if [k1, k2, k3, k4].iter().any(|k| *k != base_kinks) {
                check.skipped += 1;
                continue;
            }
            let numeric = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * step);
            let err = relative_error(g, numeric);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = k;
            }
            check.checked += 1;
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Tensor;

    #[test]
    fn sigmoid_sum_matches() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::vector(vec![0.3, -1.2, 2.5, 0.0])).unwrap();
        let id = store.id("x").unwrap();
        let report = grad_check(&mut store, DEFAULT_STEP, |t| {
            let x = t.param(id);
            let s = t.sigmoid(x)?;
            t.sum(s)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-7, "{report:?}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let report = grad_check(&mut store, DEFAULT_STEP, |t| Ok(t.constant(Tensor::scalar(3.0)))).unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
        assert_eq!(report.checked(), 2);
    }

    #[test]
    fn relu_kink_coordinate_is_skipped() {
        let mut store = ParamStore::new();
        let id = store.register("x", Tensor::vector(vec![0.0, 1.0])).unwrap();
        let report = grad_check(&mut store, DEFAULT_STEP, |t| {
            let x = t.param(id);
            let r = t.relu(x)?;
            t.sum(r)
        })
        .unwrap();
        assert_eq!(report.skipped(), 1);
        assert_eq!(report.checked(), 1);
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn nondeterminism_is_a_protocol_error() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        store.register("x", Tensor::vector(vec![1.0])).unwrap();
        let calls = Cell::new(0.0);
        let res = grad_check(&mut store, DEFAULT_STEP, |t| {
            calls.set(calls.get() + 1.0);
            Ok(t.constant(Tensor::scalar(calls.get())))
        });
        assert!(matches!(res, Err(Error::Protocol(_))));
    }
}
