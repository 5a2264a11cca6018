//! Decision boundaries of star and sum networks next to polynomial- and
//! Gaussian-kernel classifiers, with grid agreement between every pair.
//! Writes `boundary_<model>.pgm` images for seed 0 to the working directory.
//!
//! Pass `full` for the four-seed, 30-epoch configuration.

use starkernel::train::{run_boundary_suite, GridSpec, SuiteConfig, TrainRecipe, SUITE_MODELS};

fn main() -> starkernel::Result<()> {
    let full = std::env::args().any(|a| a == "full");
    let cfg = if full {
        SuiteConfig::default()
    } else {
        SuiteConfig {
            seeds: vec![0],
            grid: GridSpec::default().with_resolution(100),
            recipe: TrainRecipe {
                epochs: 10,
                ..TrainRecipe::moons(0)
            },
            ..SuiteConfig::default()
        }
    };
    for o in run_boundary_suite(&cfg)? {
        println!("seed {}", o.seed);
        for (i, m) in SUITE_MODELS.iter().enumerate() {
            let row: Vec<String> = o.agreement[i].iter().map(|a| format!("{a:.3}")).collect();
            println!("  {m:>4}  acc {:.3}  agreement {}", o.eval_acc[i], row.join(" "));
        }
        if o.seed == 0 {
            for (m, grid) in SUITE_MODELS.iter().zip(&o.grids) {
                std::fs::write(format!("boundary_{m}.pgm"), grid.to_pgm())?;
            }
        }
    }
    Ok(())
}
