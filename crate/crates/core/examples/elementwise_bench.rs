//! Element-wise multiply costs the same as add: time both on the feature-map
//! shapes where StarNet-S4 applies its star product.

use starkernel::bench::{compare_shape, starnet_s4_shapes};

fn main() -> starkernel::Result<()> {
    for shape in starnet_s4_shapes()? {
        let c = compare_shape(&shape, 200, 20)?;
        println!(
            "{:?}: mul {:.1} us, add {:.1} us, ratio {:.3}",
            shape,
            c.mul.median_ns / 1e3,
            c.add.median_ns / 1e3,
            c.ratio
        );
    }
    Ok(())
}
