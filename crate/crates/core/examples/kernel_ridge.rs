//! Kernel views of the star product: the degree-2 polynomial kernel as an
//! explicit feature map, the Gaussian kernel as its infinite series, and
//! kernel ridge classifiers on the moons.

use starkernel::algebra::*;
use starkernel::train::{eval_split, make_moons};

fn main() -> starkernel::Result<()> {
    let (a, b) = ([0.3, -1.2], [0.8, 0.5]);
    let phi = |x: &[f64]| poly2_feature_map(x, 1.0, 1.0);
    let mapped: f64 = phi(&a)?.iter().zip(phi(&b)?).map(|(p, q)| p * q).sum();
    println!("poly kernel {:.12}, via {} features {mapped:.12}", poly_kernel(&a, &b, 1.0, 1.0, 2)?, phi(&a)?.len());

    let exact = gaussian_kernel(&a, &b, UNIT_SIGMA)?;
    for terms in [2, 5, 10, 20] {
        let approx = gaussian_kernel_taylor(&a, &b, UNIT_SIGMA, terms)?;
        println!("gaussian, {terms:>2} series terms: error {:.2e}", (approx - exact).abs());
    }

    let train = make_moons(200, 0.2, 0)?;
    let eval = eval_split(&train)?;
    let kernels = [
        Kernel::Linear,
        Kernel::Polynomial { gamma: 1.0, c: 1.0, degree: 3 },
        Kernel::Gaussian { sigma: 0.5 },
    ];
    for k in kernels {
        let clf = KernelRidgeClassifier::fit(&train.points, &train.labels, k, 1e-3)?;
        println!(
            "{:>10}: train {:.3}  held out {:.3}",
            k.name(),
            clf.accuracy(&train.points, &train.labels)?,
            clf.accuracy(&eval.points, &eval.labels)?
        );
    }
    Ok(())
}
