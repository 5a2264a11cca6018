use starkernel::arch::{DemoNet, Model, StarNet, StarVariant};
use starkernel::nn::FusionMode;

fn main() -> starkernel::Result<()> {
    for v in StarVariant::ALL {
        let net = StarNet::variant(v, 0)?;
        let r = net.cost(&[1, 3, 224, 224])?;
        assert_eq!(r.total_params, net.store.num_elements());
        println!("{:>5}  params {:>8.4}M  FLOPs {:>8.2}M", v, r.params_millions(), r.macs_millions());
    }
    let demo = DemoNet::new(192, 12, FusionMode::Star, 1000, 0)?;
    let r = demo.cost(&[1, 3, 224, 224])?;
    println!(" demo  params {:>8.4}M  FLOPs {:>8.2}M  ({} / {})", r.params_millions(), r.macs_millions(), r.total_params, r.total_macs);
    Ok(())
}
