use starkernel::arch::DemoNet2d;
use starkernel::nn::FusionMode;
use starkernel::train::{eval_split, make_moons, train, TrainRecipe};

fn main() -> starkernel::Result<()> {
    let data = make_moons(1000, 0.2, 0)?;
    let eval = eval_split(&data)?;
    for fusion in [FusionMode::Star, FusionMode::Sum] {
        let t = std::time::Instant::now();
        let mut net = DemoNet2d::build(fusion, 0)?;
        let h = train(&mut net, &data, &eval, &TrainRecipe::moons(0))?;
        let last = h.last().unwrap();
        println!("{:?} acc {:.4}/{:.4} loss {:.4} in {:?}", fusion, last.train_acc, last.eval_acc, last.train_loss, t.elapsed());
    }
    Ok(())
}
