//! The star product of two linear maps is a quadratic form; expand it
//! explicitly and count how fast the implicit dimension grows with depth.

use starkernel::algebra::*;
use starkernel::rng;

fn main() -> starkernel::Result<()> {
    let mut r = rng::stream(0, 0);
    let mut draw = |n: usize| (0..n).map(|_| rng::normal(&mut r)).collect::<Vec<_>>();
    let w1 = StarWeights::new(&draw(3), 0.5);
    let w2 = StarWeights::new(&draw(3), -1.0);
    let x = AugmentedVector::from_features(&draw(3));

    let exp = expand_star(&w1, &w2)?;
    println!("{} terms for d = {}", exp.term_count(), exp.dim());
    for (i, j, a) in exp.terms() {
        println!("  alpha({i},{j}) = {a:+.4}");
    }
    let direct = w1.apply(&x)? * w2.apply(&x)?;
    println!("star {direct:.12}  expansion {:.12}", evaluate_expansion(&exp, &x)?);
    let [quad, lin, c] = exp.degree_parts(&x)?;
    println!("degree parts {quad:.4} + {lin:.4} + {c:.4}");

    for d in [1, 8, 32] {
        let rep = verify_star_equivalence(d, 100, 1e-9)?;
        println!("d = {d:>2}: max deviation {:.2e}, passed {}", rep.max_deviation, rep.passed);
    }

    println!("one layer at width 128: {} dimensions", implicit_dims_one_layer(128)?);
    for l in [1, 2, 5, 10] {
        let rep = implicit_dims_multi_layer(128, l)?;
        println!("{l:>2} layers: about 10^{:.1} ({:.2}^{})", rep.log10_dims, rep.base(), rep.exponent());
    }
    for case in [SpecialCase::CaseII, SpecialCase::CaseIII] {
        println!("{case:?}: {} dimensions at width 128", special_case_dims(case, 128)?);
    }
    Ok(())
}
