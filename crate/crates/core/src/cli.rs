//! The `starkernel` command line.
//!
//! Exit codes: 0 success, 1 verification failure or runtime error, 2 usage
//! error. Every command given `--out DIR` writes its artifacts there plus a
//! `manifest.json` that is enough to rerun it.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::algebra::{implicit_dims_multi_layer, implicit_dims_one_layer, verify_star_equivalence_with, EquivalenceCheck};
use crate::arch::{DemoNet, DemoNet2d, Model, StarNet, StarVariant};
use crate::bench::{compare_shape, parse_shape, starnet_s4_shapes, ShapeComparison};
use crate::error::{invalid, Error, Result};
use crate::fmt::{fmt9, stable_json};
use crate::nn::{ActPlacement, FusionMode};
use crate::tensor::with_backward_fault;
use crate::train::{
    boundary_eval, eval_split, make_moons, run_boundary_suite, thread_budget, train, BoundaryGrid, GridSpec, SuiteConfig, TrainRecipe, SUITE_MODELS,
};
use crate::verify::{block_gradchecks, op_gradchecks, op_kind, GradSuiteRow, GRAD_TOL};

#[derive(Parser, Debug, Serialize)]
#[command(name = "starkernel", version, about = "Star-operation networks: verification, experiments, costs and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Check the star product against its explicit quadratic expansion.
    ExpandVerify(ExpandVerify),
    /// Count the implicit dimensions of stacked star layers.
    ImplicitDims(ImplicitDims),
    /// Train the 2D demo network on noisy moons and map its decision boundary.
    TrainMoons(TrainMoons),
    /// Star, sum, polynomial-kernel and Gaussian-kernel boundaries over several seeds.
    BoundarySuite(BoundarySuite),
    /// Parameter and FLOP counts of a network.
    CostReport(CostReportArgs),
    /// Element-wise multiply vs add latency.
    BenchElementwise(BenchElementwise),
    /// Finite-difference checks of every backward rule.
    GradCheck(GradCheck),
}

fn parse_dim(s: &str) -> std::result::Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(0) => Err("dimension must be ≥ 1".into()),
        Ok(d) => Ok(d),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_tol(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(t) if t >= 0.0 => Ok(t),
        _ => Err(format!("tolerance must be a number ≥ 0, got {s:?}")),
    }
}

#[derive(Args, Debug, Serialize)]
struct ExpandVerify {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32", value_parser = parse_dim)]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    #[arg(long, default_value_t = 1e-9, value_parser = parse_tol)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ImplicitDims {
    /// Channels per layer.
    #[arg(long, value_parser = parse_dim)]
    width: usize,
    /// Stacked star layers; 0 prints the exact one-layer count.
    #[arg(long, default_value_t = 1)]
    layers: u32,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FusionArg {
    Star,
    Sum,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Star => FusionMode::Star,
            FusionArg::Sum => FusionMode::Sum,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PlacementArg {
    One,
    Both,
    Post,
    None,
}

impl From<PlacementArg> for ActPlacement {
    fn from(p: PlacementArg) -> Self {
        match p {
            PlacementArg::One => ActPlacement::One,
            PlacementArg::Both => ActPlacement::Both,
            PlacementArg::Post => ActPlacement::Post,
            PlacementArg::None => ActPlacement::None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct MoonsArgs {
    /// Training points (the held-out set has the same size).
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(2..))]
    n: u64,
    #[arg(long, default_value_t = 0.2, value_parser = parse_tol)]
    noise: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Grid cells per side.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(2..))]
    resolution: u64,
}

impl MoonsArgs {
    fn recipe(&self, seed: u64) -> TrainRecipe {
        TrainRecipe {
            epochs: self.epochs,
            ..TrainRecipe::moons(seed)
        }
    }

    fn grid(&self) -> GridSpec {
        GridSpec::default().with_resolution(self.resolution as usize)
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainMoons {
    #[arg(long, value_enum, default_value = "star")]
    fusion: FusionArg,
    #[arg(long, value_enum, default_value = "one")]
    placement: PlacementArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    moons: MoonsArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BoundarySuite {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3", num_args = 1..)]
    seeds: Vec<String>,
    /// Also sweep k star blocks followed by sum blocks, k = 0..=4.
    #[arg(long)]
    mixed: bool,
    /// Worker threads; defaults to STARKERNEL_THREADS or the hardware count.
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    moons: MoonsArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum VariantArg {
    S1,
    S2,
    S3,
    S4,
    N050,
    N100,
    N150,
    Demo,
}

#[derive(Args, Debug, Serialize)]
struct CostReportArgs {
    #[arg(long, value_enum)]
    variant: VariantArg,
    /// Demo network width.
    #[arg(long, default_value_t = 192)]
    width: usize,
    /// Demo network depth.
    #[arg(long, default_value_t = 12)]
    depth: usize,
    #[arg(long, value_enum, default_value = "star")]
    fusion: FusionArg,
    /// Input side length.
    #[arg(long, default_value_t = 224)]
    input: usize,
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BenchElementwise {
    /// `starnet-s4`, or a comma-separated list of shapes like `1x128x56x56`.
    #[arg(long, default_value = "starnet-s4")]
    shapes: String,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    iters: u64,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    /// Exit 1 unless every mul/add ratio lies in [0.5, 2].
    #[arg(long)]
    check: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum GradModule {
    All,
    Tensor,
    Blocks,
}

#[derive(Args, Debug, Serialize)]
struct GradCheck {
    #[arg(long, value_enum, default_value = "all")]
    module: GradModule,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sign-flip one op family's backward rule, to prove the checks bite.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Everything needed to rerun a command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub flags: serde_json::Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub outputs: Vec<String>,
    pub timestamp: u64,
}

/// Writes via a temporary file in the same directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Collects artifacts of one run under an output directory.
struct Artifacts {
    dir: Option<PathBuf>,
    written: Vec<String>,
}

impl Artifacts {
    fn new(dir: Option<&Path>) -> Self {
        Self {
            dir: dir.map(Path::to_path_buf),
            written: Vec::new(),
        }
    }

    fn put(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        if let Some(dir) = &self.dir {
            write_atomic(&dir.join(rel), bytes.as_ref())?;
            self.written.push(rel.to_string());
        }
        Ok(())
    }

    fn grid(&mut self, stem: &str, grid: &BoundaryGrid) -> Result<()> {
        self.put(&format!("{stem}.csv"), grid.to_csv())?;
        self.put(&format!("{stem}.pgm"), grid.to_pgm())?;
        self.put(&format!("{stem}.ppm"), grid.to_ppm())
    }

    fn finish(self, subcommand: &str, argv: &[String], flags: &impl Serialize, seed: Option<u64>) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let manifest = RunManifest {
            subcommand: subcommand.to_string(),
            argv: argv.to_vec(),
            flags: serde_json::to_value(flags)?,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: self.written,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        write_atomic(&dir.join("manifest.json"), stable_json(&manifest)?.as_bytes())
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cmd: Command, argv: &[String]) -> Result<bool> {
    match cmd {
        Command::ExpandVerify(a) => expand_verify(a, argv),
        Command::ImplicitDims(a) => implicit_dims(a),
        Command::TrainMoons(a) => train_moons(a, argv),
        Command::BoundarySuite(a) => boundary_suite(a, argv),
        Command::CostReport(a) => cost_report(a, argv),
        Command::BenchElementwise(a) => bench(a, argv),
        Command::GradCheck(a) => grad_check(a, argv),
    }
}

fn expand_verify(a: ExpandVerify, argv: &[String]) -> Result<bool> {
    let reports = a
        .dims
        .iter()
        .map(|&d| {
            verify_star_equivalence_with(&EquivalenceCheck {
                d,
                trials: a.trials as usize,
                tol: a.tol,
                seed: a.seed,
                perturb: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let passed = reports.iter().all(|r| r.passed);
    let failing: Vec<usize> = reports.iter().filter(|r| !r.passed).map(|r| r.d).collect();
    let doc = json!({
        "trials": a.trials,
        "tol": a.tol,
        "seed": a.seed,
        "passed": passed,
        "failing_dims": failing,
        "results": reports,
    });
    let text = stable_json(&doc)?;
    print!("{text}");
    for d in &failing {
        eprintln!("expansion check failed for d = {d}");
    }
    let mut out = Artifacts::new(a.out.as_deref());
    out.put("expand_verify.json", &text)?;
    out.finish("expand-verify", argv, &a, Some(a.seed))?;
    Ok(passed)
}

fn implicit_dims(a: ImplicitDims) -> Result<bool> {
    if a.layers == 0 {
        let n = implicit_dims_one_layer(a.width)?;
        println!("width {}  one star layer: {} implicit dimensions", a.width, n);
        return Ok(true);
    }
    println!("{:>6}  {:>6}  {:>18}  approx", "width", "layers", "log10(dims)");
    for l in 1..=a.layers {
        let r = implicit_dims_multi_layer(a.width, l)?;
        println!(
            "{:>6}  {:>6}  {:>18}  ≈ 10^{:.1}  ({:.4}^{})",
            a.width,
            l,
            fmt9(r.log10_dims),
            r.log10_dims,
            r.base(),
            fmt9(r.exponent())
        );
    }
    Ok(true)
}

fn train_moons(a: TrainMoons, argv: &[String]) -> Result<bool> {
    let data = make_moons(a.moons.n as usize, a.moons.noise, a.seed)?;
    let eval = eval_split(&data)?;
    let (fusion, placement): (FusionMode, ActPlacement) = (a.fusion.into(), a.placement.into());
    let mut net = DemoNet2d::uniform(DemoNet2d::WIDTH, DemoNet2d::DEPTH, fusion, placement, a.seed)?;
    let history = train(&mut net, &data, &eval, &a.moons.recipe(a.seed))?;
    let grid = boundary_eval(&mut net, &a.moons.grid())?;
    if let Some(last) = history.last() {
        println!(
            "{} {}  epochs {}  loss {}  train acc {}  eval acc {}",
            fusion.name(),
            placement.name(),
            last.epoch,
            fmt9(last.train_loss),
            fmt9(last.train_acc),
            fmt9(last.eval_acc)
        );
    }
    println!("boundary cells {} of {}", grid.boundary_cells(), grid.classes.len());
    let mut out = Artifacts::new(a.out.as_deref());
    out.put("history.csv", history.to_csv())?;
    out.grid("boundary", &grid)?;
    out.finish("train-moons", argv, &a, Some(a.seed))?;
    Ok(true)
}

fn boundary_suite(a: BoundarySuite, argv: &[String]) -> Result<bool> {
    let seeds = a
        .seeds
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<u64>().map_err(|_| invalid(format!("bad seed {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(invalid("--seeds must list at least one seed"));
    }
    let cfg = SuiteConfig {
        seeds,
        n: a.moons.n as usize,
        noise: a.moons.noise,
        grid: a.moons.grid(),
        recipe: a.moons.recipe(0),
        mixed: a.mixed,
        threads: a.threads.unwrap_or_else(thread_budget),
        ..SuiteConfig::default()
    };
    let outcomes = run_boundary_suite(&cfg)?;
    let mut out = Artifacts::new(a.out.as_deref());
    let mut table = String::new();
    let _ = writeln!(table, "{:>6}  {:>10}  {:>10}  {:>10}  {:>10}  {:>12}  {:>12}", "seed", "star acc", "sum acc", "poly acc", "rbf acc", "star~poly", "star~rbf");
    for o in &outcomes {
        let _ = writeln!(
            table,
            "{:>6}  {:>10}  {:>10}  {:>10}  {:>10}  {:>12}  {:>12}",
            o.seed,
            fmt9(o.eval_acc[0]),
            fmt9(o.eval_acc[1]),
            fmt9(o.eval_acc[2]),
            fmt9(o.eval_acc[3]),
            fmt9(o.agreement_of("star", "poly")),
            fmt9(o.agreement_of("star", "rbf"))
        );
        for (name, grid) in SUITE_MODELS.iter().zip(&o.grids) {
            out.grid(&format!("seed{}/{name}", o.seed), grid)?;
        }
        for (name, h) in ["star", "sum"].iter().zip(&o.histories) {
            out.put(&format!("seed{}/history_{name}.csv", o.seed), h.to_csv())?;
        }
    }
    let closer = outcomes.iter().filter(|o| o.star_closer_to_poly()).count();
    let _ = writeln!(table, "star closer to poly than to rbf in {closer} of {} seeds", outcomes.len());
    print!("{table}");
    for o in &outcomes {
        for m in &o.mixed {
            println!("seed {}  star blocks {}  eval acc {}", o.seed, m.star_blocks, fmt9(m.eval_acc));
        }
    }
    let doc = json!({
        "models": SUITE_MODELS,
        "grid": cfg.grid,
        "star_closer_to_poly": closer,
        "seeds": outcomes.iter().map(|o| json!({
            "seed": o.seed,
            "agreement": o.agreement,
            "eval_acc": SUITE_MODELS.iter().zip(&o.eval_acc).map(|(m, a)| (m.to_string(), json!(a))).collect::<serde_json::Map<_, _>>(),
            "star_closer_to_poly": o.star_closer_to_poly(),
            "mixed": o.mixed,
        })).collect::<Vec<_>>(),
    });
    out.put("agreement.json", stable_json(&doc)?)?;
    out.finish("boundary-suite", argv, &a, None)?;
    Ok(true)
}

fn cost_report(a: CostReportArgs, argv: &[String]) -> Result<bool> {
    let input = [1, 3, a.input, a.input];
    let report = match a.variant {
        VariantArg::Demo => DemoNet::new(a.width, a.depth, a.fusion.into(), a.classes, 0)?.cost(&input)?,
        v => {
            let variant = match v {
                VariantArg::S1 => StarVariant::S1,
                VariantArg::S2 => StarVariant::S2,
                VariantArg::S3 => StarVariant::S3,
                VariantArg::S4 => StarVariant::S4,
                VariantArg::N050 => StarVariant::N050,
                VariantArg::N100 => StarVariant::N100,
                _ => StarVariant::N150,
            };
            let mut cfg = variant.config();
            cfg.num_classes = a.classes;
            StarNet::new(cfg, 0)?.cost(&input)?
        }
    };
    let text = stable_json(&report.to_json())?;
    if a.json {
        print!("{text}");
    } else {
        print!("{}", report.to_table());
    }
    let mut out = Artifacts::new(a.out.as_deref());
    out.put("cost.json", &text)?;
    out.finish("cost-report", argv, &a, None)?;
    Ok(true)
}

fn bench(a: BenchElementwise, argv: &[String]) -> Result<bool> {
    let shapes = if a.shapes.trim() == "starnet-s4" {
        starnet_s4_shapes()?
    } else {
        a.shapes.split(',').map(parse_shape).collect::<Result<Vec<_>>>()?
    };
    let results: Vec<ShapeComparison> = shapes
        .iter()
        .map(|s| compare_shape(s, a.iters as usize, a.warmup))
        .collect::<Result<_>>()?;
    println!("element-wise operator latency (desk-scale analogue of on-device model latency)");
    println!("{:>20}  {:>14}  {:>14}  {:>14}  {:>8}", "shape", "mul median us", "add median us", "mul p90 us", "mul/add");
    for r in &results {
        let shape = r.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        println!(
            "{:>20}  {:>14.3}  {:>14.3}  {:>14.3}  {:>8.3}",
            shape,
            r.mul.median_ns / 1e3,
            r.add.median_ns / 1e3,
            r.mul.p90_ns / 1e3,
            r.ratio
        );
    }
    let mut out = Artifacts::new(a.out.as_deref());
    out.put("bench.json", stable_json(&results)?)?;
    out.finish("bench-elementwise", argv, &a, None)?;
    let ok = results.iter().all(|r| r.within(0.5, 2.0));
    if a.check && !ok {
        eprintln!("mul/add ratio outside [0.5, 2] on at least one shape");
        return Ok(false);
    }
    Ok(true)
}

fn grad_check(a: GradCheck, argv: &[String]) -> Result<bool> {
    let fault = match &a.inject_fault {
        Some(name) => Some(op_kind(name).ok_or_else(|| invalid(format!("unknown op family {name:?}")))?),
        None => None,
    };
    let suites = || -> Result<Vec<GradSuiteRow>> {
        let t = a.trials as usize;
        let mut rows = Vec::new();
        if a.module != GradModule::Blocks {
            rows.extend(op_gradchecks(t, a.seed)?);
        }
        if a.module != GradModule::Tensor {
            rows.extend(block_gradchecks(t, a.seed)?);
        }
        Ok(rows)
    };
    let rows = match fault {
        Some(kind) => with_backward_fault(kind, suites)?,
        None => suites()?,
    };
    for r in &rows {
        println!(
            "{:<4} {:<32} trials {:>4}  checked {:>7}  max rel err {}",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.trials,
            r.checked,
            fmt9(r.max_rel_err)
        );
    }
    let passed = rows.iter().all(|r| r.passed);
    println!("{} (tolerance {})", if passed { "all gradients match" } else { "gradient mismatch" }, GRAD_TOL);
    let mut out = Artifacts::new(a.out.as_deref());
    out.put("grad_check.json", stable_json(&rows)?)?;
    out.finish("grad-check", argv, &a, Some(a.seed))?;
    Ok(passed)
}
