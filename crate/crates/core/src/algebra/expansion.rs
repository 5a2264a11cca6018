//! Explicit degree-2 expansion of a single-output star layer.
//!
//! With weights and input augmented by a bias slot (index `d`), the star
//! product `(w1·x) * (w2·x)` is the quadratic form `Σ_i Σ_j w1[i] w2[j] x[i] x[j]`.
//! Merging the symmetric pairs gives one coefficient per monomial `x[i] x[j]`,
//! `i ≤ j`, so `(d+2)(d+1)/2` terms in total.

use serde::Serialize;

use crate::error::{invalid, shape_err, Result};
use crate::rng;

/// An input vector with the constant 1 appended (bias absorption).
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedVector(Vec<f64>);

impl AugmentedVector {
    /// Appends the bias slot to raw features.
    pub fn from_features(features: &[f64]) -> Self {
        let mut v = features.to_vec();
        v.push(1.0);
        Self(v)
    }

    /// Wraps an already augmented vector; the last entry must be exactly 1.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        match values.last() {
            Some(&v) if v == 1.0 => Ok(Self(values)),
            _ => Err(invalid("augmented vector must end with the constant 1")),
        }
    }

    /// Number of raw features `d`.
    pub fn dim(&self) -> usize {
        self.0.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn features(&self) -> &[f64] {
        &self.0[..self.0.len() - 1]
    }
}

/// One output channel of a linear map with its bias in the last slot.
#[derive(Clone, Debug, PartialEq)]
pub struct StarWeights(Vec<f64>);

impl StarWeights {
    pub fn new(weights: &[f64], bias: f64) -> Self {
        let mut v = weights.to_vec();
        v.push(bias);
        Self(v)
    }

    /// Weights already laid out as `[w_0 .. w_{d-1}, bias]`.
    pub fn from_augmented(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(invalid("star weights need at least one feature and a bias"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// `w · x` over the augmented vector.
    pub fn apply(&self, x: &AugmentedVector) -> Result<f64> {
        if x.values().len() != self.0.len() {
            return Err(shape_err(
                "StarWeights::apply",
                format!("weights {} vs input {}", self.0.len(), x.values().len()),
            ));
        }
        Ok(self.0.iter().zip(x.values()).map(|(w, v)| w * v).sum())
    }
}

/// Coefficient table of the expanded star product, stored for `i ≤ j` only.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StarExpansion {
    d: usize,
    /// Packed upper triangle, row-major over `i`, then `j ≥ i`.
    coefficients: Vec<f64>,
}

/// Number of monomials `x[i] x[j]` (`i ≤ j`) over `d` features plus bias.
pub const fn term_count(d: usize) -> usize {
    (d + 2) * (d + 1) / 2
}

impl StarExpansion {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn term_count(&self) -> usize {
        self.coefficients.len()
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        let n = self.d + 1;
        // rows 0..i hold n, n-1, …, n-i+1 entries
        i * n - i * i.saturating_sub(1) / 2 + (j - i)
    }

    /// `α(i, j)`; symmetric in its arguments. Index `d` is the bias slot.
    pub fn alpha(&self, i: usize, j: usize) -> f64 {
        self.coefficients[self.index(i, j)]
    }

    pub fn alpha_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let k = self.index(i, j);
        &mut self.coefficients[k]
    }

    /// `(i, j, α(i, j))` for every stored term.
    pub fn terms(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.d + 1;
        (0..n)
            .flat_map(move |i| (i..n).map(move |j| (i, j)))
            .zip(self.coefficients.iter().copied())
            .map(|((i, j), a)| (i, j, a))
    }

    /// Splits `Σ α x x` into its degree-2, degree-1 and constant parts in the
    /// raw features.
    pub fn degree_parts(&self, x: &AugmentedVector) -> Result<[f64; 3]> {
        self.check_input(x)?;
        let v = x.values();
        let mut parts = [0.0; 3];
        for (i, j, a) in self.terms() {
            let bias_slots = usize::from(i == self.d) + usize::from(j == self.d);
            parts[bias_slots] += a * v[i] * v[j];
        }
        Ok(parts)
    }

    fn check_input(&self, x: &AugmentedVector) -> Result<()> {
        if x.dim() != self.d {
            return Err(shape_err(
                "evaluate_expansion",
                format!("expansion over {} features, input has {}", self.d, x.dim()),
            ));
        }
        Ok(())
    }
}

/// Builds the merged coefficient table of `(w1·x) * (w2·x)`.
pub fn expand_star(w1: &StarWeights, w2: &StarWeights) -> Result<StarExpansion> {
    if w1.dim() != w2.dim() {
        return Err(shape_err(
            "expand_star",
            format!("w1 has {} features, w2 has {}", w1.dim(), w2.dim()),
        ));
    }
    let (a, b) = (w1.values(), w2.values());
    let n = a.len();
    let mut coefficients = Vec::with_capacity(term_count(n - 1));
    for i in 0..n {
        coefficients.push(a[i] * b[i]);
        for j in i + 1..n {
            coefficients.push(a[i] * b[j] + a[j] * b[i]);
        }
    }
    Ok(StarExpansion {
        d: n - 1,
        coefficients,
    })
}

/// `Σ_{i ≤ j} α(i, j) x[i] x[j]`.
pub fn evaluate_expansion(exp: &StarExpansion, x: &AugmentedVector) -> Result<f64> {
    exp.check_input(x)?;
    let v = x.values();
    let n = v.len();
    let mut acc = 0.0;
    let mut k = 0;
    for i in 0..n {
        let mut row = 0.0;
        for j in i..n {
            row += exp.coefficients[k] * v[j];
            k += 1;
        }
        acc += row * v[i];
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub d: usize,
    pub trials: usize,
    pub tol: f64,
    pub term_count: usize,
    /// Largest `|star − expansion| / max(1, |star|)` over all trials.
    pub max_deviation: f64,
    pub failures: usize,
    pub passed: bool,
}

/// Options for [`verify_star_equivalence_with`].
#[derive(Clone, Debug)]
pub struct EquivalenceCheck {
    pub d: usize,
    pub trials: usize,
    pub tol: f64,
    pub seed: u64,
    /// Added to `α(0, d)` of every expansion; exercises the checker itself.
    pub perturb: Option<f64>,
}

/// Draws random `(w1, w2, x)` and compares the star product with the
/// evaluated expansion. Failures are reported, not returned as errors.
pub fn verify_star_equivalence(d: usize, trials: usize, tol: f64) -> Result<EquivalenceReport> {
    verify_star_equivalence_with(&EquivalenceCheck {
        d,
        trials,
        tol,
        seed: 0,
        perturb: None,
    })
}

pub fn verify_star_equivalence_with(check: &EquivalenceCheck) -> Result<EquivalenceReport> {
    if check.d == 0 || check.trials == 0 {
        return Err(invalid("verify_star_equivalence needs d ≥ 1 and trials ≥ 1"));
    }
    let mut r = rng::stream(check.seed ^ (check.d as u64).wrapping_mul(0x9E37_79B9), rng::streams::PROBE);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng::normal(&mut r)).collect() };
    let mut max_deviation: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..check.trials {
        let w1 = StarWeights::new(&draw(check.d), draw(1)[0]);
        let w2 = StarWeights::new(&draw(check.d), draw(1)[0]);
        let x = AugmentedVector::from_features(&draw(check.d));
        let mut exp = expand_star(&w1, &w2)?;
        if let Some(delta) = check.perturb {
            *exp.alpha_mut(0, check.d) += delta;
        }
        let direct = w1.apply(&x)? * w2.apply(&x)?;
        let expanded = evaluate_expansion(&exp, &x)?;
        let dev = (direct - expanded).abs() / direct.abs().max(1.0);
        max_deviation = max_deviation.max(dev);
        if dev > check.tol {
            failures += 1;
        }
    }
    Ok(EquivalenceReport {
        d: check.d,
        trials: check.trials,
        tol: check.tol,
        term_count: term_count(check.d),
        max_deviation,
        failures,
        passed: failures == 0,
    })
}
