//! Build a small StarNet for 10 classes, take one training step on random
//! images, then swap the first two stages to sum fusion.

use starkernel::arch::{Model, Network, StarNet, StarNetConfig, StarVariant};
use starkernel::nn::{ForwardCtx, FusionMode};
use starkernel::rng;
use starkernel::tensor::{Graph, Tensor};

fn main() -> starkernel::Result<()> {
    let cfg = StarNetConfig {
        num_classes: 10,
        ..StarVariant::S1.config()
    };
    println!("stage widths {:?}, depths {:?}", cfg.stage_widths(), cfg.depths);
    let mut net = Network::Star(StarNet::new(cfg, 0)?);
    let x = Tensor::randn(&[4, 3, 64, 64], &mut rng::stream(0, 1));

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let logits = net.forward(&mut g, xv, &mut ForwardCtx::train(0))?;
    let loss = g.cross_entropy(logits, &[0, 3, 5, 9])?;
    net.params_mut().zero_grad();
    g.backward(loss, net.params_mut())?;
    println!("loss {:.4}, logits {:?}", g.value(loss).item()?, g.value(logits).shape());

    net.replace_fusion_by_stage([FusionMode::Sum, FusionMode::Sum, FusionMode::Star, FusionMode::Star])?;
    let mut g = Graph::new();
    let xv = g.input(x);
    let y = net.forward(&mut g, xv, &mut ForwardCtx::eval())?;
    println!("mixed fusion output {:?}, {} parameters", g.value(y).shape(), net.params().num_elements());
    Ok(())
}
