//! Kernel functions used as reference points for the star operation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

/// `σ` at which [`gaussian_kernel`] becomes `exp(−‖x1 − x2‖²)`, the unit-scale
/// form whose Taylor expansion is written without any bandwidth.
pub const UNIT_SIGMA: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("kernel", format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// `(γ ⟨x1, x2⟩ + c)^deg`.
pub fn poly_kernel(x1: &[f64], x2: &[f64], gamma: f64, c: f64, deg: u32) -> Result<f64> {
    if deg == 0 {
        return Err(invalid("polynomial kernel degree must be ≥ 1"));
    }
    Ok((gamma * dot(x1, x2)? + c).powi(deg as i32))
}

/// Explicit feature map `φ` with `⟨φ(x1), φ(x2)⟩ = (γ ⟨x1, x2⟩ + c)²`.
///
/// Entries: `γ x_i²`, `√2 γ x_i x_j` (`i < j`), `√(2γc) x_i`, `c`. Needs `γc ≥ 0`.
pub fn poly2_feature_map(x: &[f64], gamma: f64, c: f64) -> Result<Vec<f64>> {
    if gamma * c < 0.0 {
        return Err(invalid("explicit degree-2 map needs γ·c ≥ 0"));
    }
    let d = x.len();
    let mut phi = Vec::with_capacity((d + 2) * (d + 1) / 2);
    for i in 0..d {
        phi.push(gamma * x[i] * x[i]);
        for j in i + 1..d {
            phi.push(std::f64::consts::SQRT_2 * gamma * x[i] * x[j]);
        }
    }
    let lin = (2.0 * gamma * c).sqrt();
    phi.extend(x.iter().map(|v| lin * v));
    phi.push(c);
    Ok(phi)
}

/// `exp(−‖x1 − x2‖² / (2σ²))`.
pub fn gaussian_kernel(x1: &[f64], x2: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(invalid("gaussian kernel needs σ > 0"));
    }
    if x1.len() != x2.len() {
        return Err(shape_err("gaussian_kernel", format!("lengths {} and {}", x1.len(), x2.len())));
    }
    let d2: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((-d2 / (2.0 * sigma * sigma)).exp())
}

/// Gaussian kernel through its factorized power series, truncated after
/// `terms` terms:
///
/// `exp(−s‖x1‖²) · exp(−s‖x2‖²) · Σ_{i<terms} (2s ⟨x1, x2⟩)^i / i!`, `s = 1/(2σ²)`.
///
/// With `σ = UNIT_SIGMA` (`s = 1`) this is the bandwidth-free textbook form.
pub fn gaussian_kernel_taylor(x1: &[f64], x2: &[f64], sigma: f64, terms: usize) -> Result<f64> {
    if terms == 0 {
        return Err(invalid("taylor expansion needs at least one term"));
    }
    if !(sigma > 0.0) {
        return Err(invalid("gaussian kernel needs σ > 0"));
    }
    let s = 1.0 / (2.0 * sigma * sigma);
    let z = 2.0 * s * dot(x1, x2)?;
    let mut term = 1.0;
    let mut series = 1.0;
    for i in 1..terms {
        term *= z / i as f64;
        series += term;
    }
    let n1 = dot(x1, x1)?;
    let n2 = dot(x2, x2)?;
    Ok((-s * n1).exp() * (-s * n2).exp() * series)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Linear,
    Polynomial { gamma: f64, c: f64, degree: u32 },
    Gaussian { sigma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        match *self {
            Kernel::Linear => dot(a, b),
            Kernel::Polynomial { gamma, c, degree } => poly_kernel(a, b, gamma, c, degree),
            Kernel::Gaussian { sigma } => gaussian_kernel(a, b, sigma),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Linear => "linear",
            Kernel::Polynomial { .. } => "poly",
            Kernel::Gaussian { .. } => "rbf",
        }
    }
}
