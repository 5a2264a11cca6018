//! One PASS/FAIL line per acceptance criterion; exits 1 if any fails.
//!
//! Run with `cargo test --release --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use starkernel::algebra::{implicit_dims_multi_layer, term_count, verify_star_equivalence};
use starkernel::arch::{DemoNet2d, Model, StarNet, StarVariant};
use starkernel::bench::{compare_shape, starnet_s4_shapes, DEFAULT_ITERS, DEFAULT_WARMUP};
use starkernel::nn::{ActPlacement, BatchNorm, BlockConfig, ForwardCtx, FusionMode, StarBlock};
use starkernel::rng;
use starkernel::tensor::{Graph, ParamStore, Tensor};
use starkernel::train::{eval_split, make_moons, run_boundary_suite, train, SuiteConfig, TrainRecipe};
use starkernel::verify::{block_gradchecks, op_gradchecks, GRAD_TOL};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Runs one criterion, folding a runtime budget into the verdict.
fn criterion(id: &str, title: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    if let Some(b) = budget {
        if took > b {
            o.passed = false;
            o.detail.push_str(&format!("; over the {:.0} s budget", b.as_secs_f64()));
        }
    }
    println!(
        "{} {:<3} {:<34} {}  [{:.2} s]",
        if o.passed { "PASS" } else { "FAIL" },
        id,
        title,
        o.detail,
        took.as_secs_f64()
    );
    o.passed
}

fn expansion() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for d in [1, 2, 4, 8, 16, 32] {
        let r = verify_star_equivalence(d, 100, 1e-9).unwrap();
        worst = worst.max(r.max_deviation);
        ok &= r.passed && r.trials == 100 && r.term_count == (d + 2) * (d + 1) / 2 && r.term_count == term_count(d);
    }
    outcome(ok, format!("max relative deviation {worst:.2e} (tol 1e-9)"))
}

fn implicit_dims() -> Outcome {
    let r = implicit_dims_multi_layer(128, 10).unwrap();
    let want = 1024.0 * (128.0 / 2f64.sqrt()).log10();
    outcome(
        (r.log10_dims - want).abs() <= 0.5,
        format!("log10 {:.3} vs {want:.3}, base {:.2}^{}", r.log10_dims, r.base(), r.exponent()),
    )
}

fn cost_tables() -> Outcome {
    let table = [
        (StarVariant::S1, 2.9, 425.0),
        (StarVariant::S2, 3.7, 547.0),
        (StarVariant::S3, 5.8, 757.0),
        (StarVariant::S4, 7.5, 1075.0),
        (StarVariant::N050, 0.54, 92.8),
        (StarVariant::N100, 1.04, 187.1),
        (StarVariant::N150, 1.56, 229.0),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (v, params, macs) in table {
        let r = StarNet::variant(v, 0).unwrap().cost(&[1, 3, 224, 224]).unwrap();
        let (p, m) = (r.params_millions(), r.macs_millions());
        ok &= (p - params).abs() <= 0.05 && (m - macs).abs() / macs <= 0.03;
        parts.push(format!("{v:?} {p:.2}M/{m:.0}M"));
    }
    outcome(ok, parts.join(", "))
}

fn gradients() -> Outcome {
    let mut rows = op_gradchecks(100, 0).unwrap();
    rows.extend(block_gradchecks(100, 0).unwrap());
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = rows.iter().filter(|r| !r.passed || r.trials < 100).map(|r| r.name.as_str()).collect();
    outcome(
        failing.is_empty() && worst < GRAD_TOL,
        format!("{} suites, worst relative error {worst:.2e}; failing {failing:?}", rows.len()),
    )
}

/// Final held-out accuracy of the moons runs: `[star one, star none, sum one, sum none]` per seed.
fn moons_runs() -> Vec<[f64; 4]> {
    (0..3)
        .map(|seed| {
            let data = make_moons(1000, 0.2, seed).unwrap();
            let eval = eval_split(&data).unwrap();
            let mut acc = [0.0; 4];
            let cases = [
                (FusionMode::Star, ActPlacement::One),
                (FusionMode::Star, ActPlacement::None),
                (FusionMode::Sum, ActPlacement::One),
                (FusionMode::Sum, ActPlacement::None),
            ];
            for (slot, (fusion, placement)) in acc.iter_mut().zip(cases) {
                let mut net = DemoNet2d::uniform(100, 4, fusion, placement, seed).unwrap();
                let h = train(&mut net, &data, &eval, &TrainRecipe::moons(seed)).unwrap();
                *slot = h.last().unwrap().eval_acc;
            }
            acc
        })
        .collect()
}

fn kernel_ordering() -> Outcome {
    let outcomes = run_boundary_suite(&SuiteConfig::default()).unwrap();
    let closer = outcomes.iter().filter(|o| o.star_closer_to_poly()).count();
    let pairs: Vec<String> = outcomes
        .iter()
        .map(|o| format!("{:.3}/{:.3}", o.agreement_of("star", "poly"), o.agreement_of("star", "rbf")))
        .collect();
    outcome(
        closer >= 3,
        format!("star~poly > star~rbf on {closer} of {} seeds (poly/rbf: {})", outcomes.len(), pairs.join(", ")),
    )
}

fn latency() -> Outcome {
    let shapes = starnet_s4_shapes().unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for s in &shapes {
        let c = compare_shape(s, DEFAULT_ITERS, DEFAULT_WARMUP).unwrap();
        ok &= c.within(0.5, 2.0);
        parts.push(format!("{:?} {:.3}", s, c.ratio));
    }
    outcome(ok, format!("mul/add median ratio {}", parts.join(", ")))
}

/// Every artifact listed in the manifest, keyed by relative path.
fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            let rel = p.as_str().unwrap().to_string();
            let bytes = fs::read(dir.join(&rel)).unwrap();
            (rel, bytes)
        })
        .collect()
}

fn determinism() -> Outcome {
    let commands: [&[&str]; 5] = [
        &["expand-verify", "--trials", "20"],
        &["train-moons", "--n", "200", "--epochs", "3", "--resolution", "50", "--seed", "7"],
        &["boundary-suite", "--seeds", "3,4", "--n", "200", "--epochs", "2", "--resolution", "40", "--mixed"],
        &["cost-report", "--variant", "s2"],
        &["grad-check", "--trials", "2", "--seed", "9"],
    ];
    let mut compared = 0;
    let mut diverged = Vec::new();
    for args in commands {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            let status = Command::new(env!("CARGO_BIN_EXE_starkernel"))
                .args(args)
                .arg("--out")
                .arg(d.path())
                .stdout(Stdio::null())
                .status()
                .unwrap();
            assert!(status.success(), "{args:?}");
        }
        let (a, b) = (artifacts(dirs[0].path()), artifacts(dirs[1].path()));
        compared += a.len();
        if a != b {
            diverged.push(args[0]);
        }
    }
    outcome(
        diverged.is_empty(),
        format!("{compared} artifacts from 5 subcommands compared byte for byte; diverged {diverged:?}"),
    )
}

fn run_block(block: &mut StarBlock, store: &ParamStore, x: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = block.forward(&mut g, store, xv, ctx).unwrap();
    g.value(y).clone()
}

fn randomized_block(seed: u64) -> (ParamStore, StarBlock, rng::Rng) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, 0);
    let block = StarBlock::new(&mut store, "b", BlockConfig::star(8, 4.0), 0.0, &mut r).unwrap();
    for p in store.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.3 * rng::normal(&mut r));
    }
    (store, block, r)
}

fn scramble(bn: &mut BatchNorm, r: &mut rng::Rng) {
    let c = bn.channels();
    bn.stats.running_mean = (0..c).map(|_| rng::normal(r)).collect();
    bn.stats.running_var = (0..c).map(|_| rng::uniform(r, 0.3, 3.0)).collect();
}

fn block_invariants() -> Outcome {
    let (mut store, mut block, mut r) = randomized_block(1);
    for prefix in ["b.f1.", "b.f2.", "b.g.", "b.dwconv2.", "b.bn2.bias"] {
        store.zero_prefix(prefix);
    }
    let x = Tensor::randn(&[2, 8, 4, 4], &mut r);
    let identity = [ForwardCtx::train(0), ForwardCtx::eval()]
        .into_iter()
        .map(|mut ctx| run_block(&mut block, &store, &x, &mut ctx).max_abs_diff(&x).unwrap())
        .fold(0.0, f64::max);

    let (mut store, mut block, mut r) = randomized_block(2);
    scramble(&mut block.bn, &mut r);
    scramble(&mut block.bn2, &mut r);
    let x = Tensor::randn(&[2, 8, 5, 5], &mut r);
    let before = run_block(&mut block, &store, &x, &mut ForwardCtx::eval());
    block.fold_bn(&mut store).unwrap();
    let fold = run_block(&mut block, &store, &x, &mut ForwardCtx::eval()).max_abs_diff(&before).unwrap();
    outcome(
        identity < 1e-12 && fold < 1e-9,
        format!("identity residual {identity:.1e} (tol 1e-12), folded vs unfolded {fold:.1e} (tol 1e-9)"),
    )
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut all = true;
    all &= criterion("1", "expansion theorem", Some(secs(1)), expansion);
    all &= criterion("2", "implicit dimensions d=128 l=10", None, implicit_dims);
    all &= criterion("3", "StarNet cost tables", Some(secs(5)), cost_tables);
    all &= criterion("4", "gradient checks", Some(secs(30)), gradients);

    let start = Instant::now();
    let runs = moons_runs();
    let took = start.elapsed();
    let mean = |i: usize| runs.iter().map(|r| r[i]).sum::<f64>() / runs.len() as f64;
    let (star, star_none, sum, sum_none) = (mean(0), mean(1), mean(2), mean(3));
    let in_budget = took <= secs(120);
    let timing = format!("; 12 runs in {:.1} s", took.as_secs_f64());
    all &= criterion("5a", "moons: star >= sum", None, || {
        outcome(star >= sum && in_budget, format!("mean eval acc star {star:.5}, sum {sum:.5}{timing}"))
    });
    all &= criterion("5b", "moons: star reaches 0.95", None, || {
        let accs: Vec<String> = runs.iter().map(|r| format!("{:.3}", r[0])).collect();
        outcome(
            runs.iter().all(|r| r[0] >= 0.95) && in_budget,
            format!("star eval acc per seed {}", accs.join(", ")),
        )
    });
    all &= criterion("5c", "moons: smaller activation gap", None, || {
        let (sg, ug) = (star - star_none, sum - sum_none);
        outcome(sg < ug && in_budget, format!("gap star {sg:.5}, sum {ug:.5}"))
    });

    all &= criterion("6", "kernel-analogy ordering", Some(secs(180)), kernel_ordering);
    all &= criterion("7", "element-wise latency parity", Some(secs(60)), latency);
    all &= criterion("8", "determinism", None, determinism);
    all &= criterion("9", "residual identity and BN fold", Some(secs(5)), block_invariants);

    if all {
        println!("all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("some criteria fail");
        ExitCode::FAILURE
    }
}
