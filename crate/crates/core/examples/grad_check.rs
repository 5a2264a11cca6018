//! Finite-difference gradient checks, for a hand-written graph and for the
//! built-in suites.

use starkernel::rng;
use starkernel::tensor::gradcheck::check;
use starkernel::tensor::{Activation, ParamStore, Tensor};
use starkernel::verify::{block_gradchecks, op_gradchecks, GRAD_EPS, GRAD_TOL};

fn main() -> starkernel::Result<()> {
    let mut r = rng::stream(0, 0);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", Tensor::randn(&[4, 6], &mut r))?;
    let w2 = store.add("w2", Tensor::randn(&[4, 6], &mut r))?;
    let x = Tensor::randn(&[3, 4], &mut r);

    // sum(gelu(x W1) * (x W2))
    let rep = check(&[x], &mut store, GRAD_EPS, |g, v, s| {
        let (a, b) = (g.param(s, w1), g.param(s, w2));
        let h1 = g.matmul(v[0], a)?;
        let h1 = g.activation(h1, Activation::GELU)?;
        let h2 = g.matmul(v[0], b)?;
        let y = g.mul(h1, h2)?;
        g.sum(y)
    })?;
    println!("star of two projections: {} entries, max rel err {:.2e}", rep.checked, rep.max_rel_err);

    let rows = op_gradchecks(10, 0)?.into_iter().chain(block_gradchecks(10, 0)?);
    for row in rows {
        println!("{:<28} {:.2e} {}", row.name, row.max_rel_err, if row.passed { "ok" } else { "FAIL" });
    }
    println!("tolerance {GRAD_TOL}");
    Ok(())
}
