//! Kernel ridge classification: solve `(K + λI) α = y` for `±1` labels and
//! predict with the sign of `Σ α_i k(x_i, x)`.

use nalgebra::{DMatrix, DVector};

use super::kernel::Kernel;
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Above this estimated condition number of `K + λI` the Cholesky solution
/// is discarded in favour of partial-pivot elimination.
pub const CONDITION_WARNING: f64 = 1e12;

/// Relative pivot size below which elimination reports a singular system.
const PIVOT_TOL: f64 = 1e-14;

/// Dual coefficients for kernel matrix `k` (n×n, symmetric) and labels `y`.
pub fn kernel_ridge_fit(k: &Tensor, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let n = y.len();
    if k.shape() != [n, n] {
        return Err(shape_err(
            "kernel_ridge_fit",
            format!("kernel {:?} for {n} labels", k.shape()),
        ));
    }
    if !(lambda >= 0.0) {
        return Err(invalid(format!("ridge penalty must be ≥ 0, got {lambda}")));
    }
    let d = k.data();
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            if (d[i * n + j] - d[j * n + i]).abs() > 1e-9 * scale {
                return Err(invalid("kernel matrix is not symmetric"));
            }
        }
    }
    let mut a = DMatrix::from_row_slice(n, n, d);
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let rhs = DVector::from_column_slice(y);

    if let Some(chol) = a.clone().cholesky() {
        let l = chol.l_dirty();
        let diag: Vec<f64> = (0..n).map(|i| l[(i, i)].abs()).collect();
        let (lo, hi) = diag
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo > 0.0 && (hi / lo).powi(2) < CONDITION_WARNING {
            return Ok(chol.solve(&rhs).iter().copied().collect());
        }
    }

    let lu = a.lu();
    let u = lu.u();
    let umax = (0..n).map(|i| u[(i, i)].abs()).fold(0.0, f64::max);
    if (0..n).any(|i| u[(i, i)].abs() <= PIVOT_TOL * umax.max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular);
    }
    lu.solve(&rhs)
        .map(|x| x.iter().copied().collect())
        .ok_or(Error::Singular)
}

/// Gram matrix of the rows of `a` against the rows of `b`.
pub fn gram(kernel: &Kernel, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, rb): (Vec<&[f64]>, Vec<&[f64]>) = (a.rows()?.collect(), b.rows()?.collect());
    let mut out = Vec::with_capacity(ra.len() * rb.len());
    for x in &ra {
        for z in &rb {
            out.push(kernel.eval(x, z)?);
        }
    }
    Tensor::new(vec![ra.len(), rb.len()], out)
}

/// A fitted kernel ridge classifier over `{0, 1}` classes.
#[derive(Clone, Debug)]
pub struct KernelRidgeClassifier {
    pub kernel: Kernel,
    pub lambda: f64,
    support: Tensor,
    alpha: Vec<f64>,
}

impl KernelRidgeClassifier {
    /// `points: [n, d]`; classes are mapped to `y = 2c − 1`.
    pub fn fit(points: &Tensor, classes: &[usize], kernel: Kernel, lambda: f64) -> Result<Self> {
        if points.rank() != 2 || points.shape()[0] != classes.len() {
            return Err(shape_err(
                "KernelRidgeClassifier::fit",
                format!("points {:?} for {} labels", points.shape(), classes.len()),
            ));
        }
        let y: Vec<f64> = classes
            .iter()
            .map(|&c| match c {
                0 => Ok(-1.0),
                1 => Ok(1.0),
                _ => Err(invalid(format!("binary classifier got class {c}"))),
            })
            .collect::<Result<_>>()?;
        let k = gram(&kernel, points, points)?;
        let alpha = kernel_ridge_fit(&k, &y, lambda)?;
        Ok(Self {
            kernel,
            lambda,
            support: points.clone(),
            alpha,
        })
    }

    pub fn dual_coefficients(&self) -> &[f64] {
        &self.alpha
    }

    /// `Σ α_i k(x_i, x)`; positive means class 1.
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (xi, a) in self.support.rows()?.zip(&self.alpha) {
            acc += a * self.kernel.eval(xi, x)?;
        }
        Ok(acc)
    }

    /// Class index; a zero decision value goes to class 0.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(usize::from(self.decision(x)? > 0.0))
    }

    pub fn accuracy(&self, points: &Tensor, classes: &[usize]) -> Result<f64> {
        let mut hits = 0;
        for (p, &c) in points.rows()?.zip(classes) {
            hits += usize::from(self.predict(p)? == c);
        }
        Ok(hits as f64 / classes.len().max(1) as f64)
    }
}
