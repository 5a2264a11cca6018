use starkernel::tensor::{ParamStore, Tensor};
use starkernel::train::{adamw_step, cosine_lr, sgd_momentum_step, Optimizer, OptimizerKind};

/// Minimises (x - 3)^2 from x = 0 under a cosine schedule.
fn descend(kind: OptimizerKind, base_lr: f64, step: fn(&mut ParamStore, &mut Optimizer, f64) -> starkernel::Result<()>) -> starkernel::Result<f64> {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(0.0))?;
    let mut opt = Optimizer::new(kind, 0.0, &store);
    let steps = 300;
    for s in 0..steps {
        let x = store.value(id).item()?;
        store.get_mut(id).grad = Some(Tensor::scalar(2.0 * (x - 3.0)));
        step(&mut store, &mut opt, cosine_lr(s, steps, base_lr, 0.0, 10)?)?;
    }
    store.value(id).item()
}

fn main() -> starkernel::Result<()> {
    for s in [0, 5, 10, 100, 200, 299] {
        println!("step {s:>3}: lr {:.5}", cosine_lr(s, 300, 0.1, 0.005, 10)?);
    }
    let sgd = descend(OptimizerKind::Sgd { momentum: 0.9 }, 0.05, sgd_momentum_step)?;
    let adam = OptimizerKind::AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let adamw = descend(adam, 0.1, adamw_step)?;
    println!("sgd momentum: x = {sgd:.6}\nadamw:        x = {adamw:.6}");
    Ok(())
}
