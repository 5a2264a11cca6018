//! Implicit dimension counts of stacked star operations.

use serde::Serialize;

use super::expansion::term_count;
use crate::error::{invalid, Result};

/// Distinct monomials produced by one star layer over `d` channels.
pub fn implicit_dims_one_layer(d: usize) -> Result<u128> {
    if d == 0 {
        return Err(invalid("implicit_dims_one_layer needs d ≥ 1"));
    }
    Ok(term_count(d) as u128)
}

/// Magnitude of the implicit feature space after `l` stacked star layers of
/// width `d`, approximated as `(d/√2)^(2^l)` and kept in log space.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImplicitDimReport {
    pub d: usize,
    pub l: u32,
    pub log10_dims: f64,
}

impl ImplicitDimReport {
    /// `d / √2`, the per-layer base of the exponent tower.
    pub fn base(&self) -> f64 {
        self.d as f64 / std::f64::consts::SQRT_2
    }

    /// `2^l`.
    pub fn exponent(&self) -> f64 {
        2f64.powi(self.l as i32)
    }
}

pub fn implicit_dims_multi_layer(d: usize, l: u32) -> Result<ImplicitDimReport> {
    if d < 2 || l == 0 {
        return Err(invalid("implicit_dims_multi_layer needs d ≥ 2 and l ≥ 1"));
    }
    if l >= f64::MAX_EXP as u32 {
        return Err(invalid(format!("2^{l} overflows the exponent range")));
    }
    let base = (d as f64 / std::f64::consts::SQRT_2).log10();
    let log10_dims = 2f64.powi(l as i32) * base;
    if !log10_dims.is_finite() {
        return Err(invalid(format!("log10 of (d/√2)^(2^{l}) overflows")));
    }
    Ok(ImplicitDimReport { d, l, log10_dims })
}

/// Star variants with a degenerate branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SpecialCase {
    /// `W1ᵀX * X`: one branch untransformed.
    CaseII,
    /// `X * X`: neither branch transformed.
    CaseIII,
}

pub fn special_case_dims(case: SpecialCase, d: usize) -> Result<usize> {
    if d == 0 {
        return Err(invalid("special_case_dims needs d ≥ 1"));
    }
    Ok(match case {
        SpecialCase::CaseII => 2 * d,
        SpecialCase::CaseIII => d,
    })
}
