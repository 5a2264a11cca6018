//! How much do star and sum networks lose when the activations go?
//! Trains the 2D demo network on the moons with each activation placement.

use starkernel::arch::DemoNet2d;
use starkernel::nn::{ActPlacement, FusionMode};
use starkernel::train::{ablate_activations, eval_split, make_moons, TrainRecipe};

fn main() -> starkernel::Result<()> {
    let data = make_moons(1000, 0.2, 0)?;
    let eval = eval_split(&data)?;
    let placements = [ActPlacement::None, ActPlacement::One, ActPlacement::Both, ActPlacement::Post];
    let recipe = TrainRecipe {
        epochs: 10,
        ..TrainRecipe::moons(0)
    };
    for fusion in [FusionMode::Star, FusionMode::Sum] {
        let build = |p| DemoNet2d::uniform(DemoNet2d::WIDTH, DemoNet2d::DEPTH, fusion, p, 0);
        for row in ablate_activations(build, &placements, &data, &eval, &recipe)? {
            println!(
                "{:>4} {:>4}  loss {:.4}  train {:.3}  eval {:.3}",
                fusion.name(),
                row.placement.name(),
                row.final_loss,
                row.train_acc,
                row.eval_acc
            );
        }
    }
    Ok(())
}
