//! Central finite-difference gradient checking.
//!
//! The checker never looks at how a gradient was computed: it perturbs each
//! input and parameter element by `±eps`, re-runs the whole forward closure
//! and compares the resulting slope with what [`Graph::backward`] reported.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{shape_err, Result};

/// Relative errors are measured as `|a - n| / max(|a|, |n|, REL_FLOOR)` so
/// that gradients which are zero up to roundoff do not divide by zero.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        self.max_rel_err = self.max_rel_err.max(rel);
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

/// Checks `d f / d inputs` and `d f / d params` for a scalar-valued `f`.
///
/// `f` receives a fresh graph, the input vars (in order) and the parameter
/// store, and must return a one-element var.
pub fn check<F>(inputs: &[Tensor], params: &mut ParamStore, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var], &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = f(&mut g, &vars, params)?;
    if g.value(out).len() != 1 {
        return Err(shape_err("gradcheck", "function must return a scalar"));
    }
    params.zero_grad();
    let grads = g.backward(out, params)?;

    let mut eval = |inputs: &[Tensor], params: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars, params)?;
        g.value(out).item()
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[k].len()],
        };
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work, params)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work, params)?;
            work[k].data_mut()[i] = orig;
            report.record(analytic[i], (plus - minus) / (2.0 * eps));
        }
    }

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic: Vec<f64> = match &params.get(id).grad {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; params.value(id).len()],
        };
        for (i, a) in analytic.into_iter().enumerate() {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(inputs, params)?;
            params.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(inputs, params)?;
            params.value_mut(id).data_mut()[i] = orig;
            report.record(a, (plus - minus) / (2.0 * eps));
        }
    }
    params.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_tracks_count() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let r = check(&[x], &mut ParamStore::new(), 1e-5, |g, v, _| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn detects_injected_fault() {
        use crate::tensor::{with_backward_fault, OpKind};
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let y = Tensor::from_vec(vec![1.5, 0.5, -0.7]);
        let r = with_backward_fault(OpKind::Mul, || {
            check(&[x, y], &mut ParamStore::new(), 1e-5, |g, v, _| {
                let p = g.mul(v[0], v[1])?;
                g.sum(p)
            })
        })
        .unwrap();
        assert!(r.max_rel_err > 1.0);
    }
}
