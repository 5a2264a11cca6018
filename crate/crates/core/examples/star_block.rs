//! A StarNet block: depthwise conv, two pointwise expansions fused by the
//! star product, projection and residual. Folding batch norm into the
//! depthwise convs leaves the eval-mode output unchanged.

use starkernel::nn::{ActPlacement, BlockConfig, ForwardCtx, StarBlock};
use starkernel::rng;
use starkernel::tensor::{Graph, ParamStore, Tensor};

fn forward(block: &mut StarBlock, store: &ParamStore, x: &Tensor, ctx: &mut ForwardCtx) -> starkernel::Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = block.forward(&mut g, store, xv, ctx)?;
    Ok(g.value(y).clone())
}

fn main() -> starkernel::Result<()> {
    let mut r = rng::stream(0, 0);
    let mut store = ParamStore::new();
    let mut block = StarBlock::new(&mut store, "block", BlockConfig::star(16, 4.0), 0.0, &mut r)?;
    println!("{} parameters", store.num_elements());

    let x = Tensor::randn(&[8, 16, 14, 14], &mut r);
    // One calibration pass gives the batch norms real running statistics.
    forward(&mut block, &store, &x, &mut ForwardCtx::calibrate())?;
    let before = forward(&mut block, &store, &x, &mut ForwardCtx::eval())?;
    block.fold_bn(&mut store)?;
    let after = forward(&mut block, &store, &x, &mut ForwardCtx::eval())?;
    println!("folded vs unfolded: max difference {:.1e}", before.max_abs_diff(&after)?);

    for placement in [ActPlacement::None, ActPlacement::One, ActPlacement::Both, ActPlacement::Post] {
        let cfg = BlockConfig {
            placement,
            ..BlockConfig::star(16, 4.0)
        };
        let mut store = ParamStore::new();
        let mut block = StarBlock::new(&mut store, "b", cfg, 0.0, &mut rng::stream(1, 0))?;
        let y = forward(&mut block, &store, &x, &mut ForwardCtx::eval())?;
        println!("{:>4}: output mean {:+.5}", placement.name(), y.data().iter().sum::<f64>() / y.data().len() as f64);
    }
    Ok(())
}
