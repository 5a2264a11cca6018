//! Star-operation algebra: the explicit expansion of one star layer, implicit
//! dimension counts, kernel functions and kernel ridge baselines.

mod dims;
mod expansion;
mod kernel;
mod ridge;

pub use dims::{
    implicit_dims_multi_layer, implicit_dims_one_layer, special_case_dims, ImplicitDimReport,
    SpecialCase,
};
pub use expansion::{
    evaluate_expansion, expand_star, term_count, verify_star_equivalence,
    verify_star_equivalence_with, AugmentedVector, EquivalenceCheck, EquivalenceReport,
    StarExpansion, StarWeights,
};
pub use kernel::{
    gaussian_kernel, gaussian_kernel_taylor, poly2_feature_map, poly_kernel, Kernel, UNIT_SIGMA,
};
pub use ridge::{gram, kernel_ridge_fit, KernelRidgeClassifier, CONDITION_WARNING};
