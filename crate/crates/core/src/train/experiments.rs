use rayon::prelude::*;
use serde::Serialize;

use super::boundary::{boundary_eval, BoundaryGrid, GridSpec};
use super::data::{eval_split, make_moons, MoonsDataset};
use super::fit::{train, History};
use super::optim::TrainRecipe;
use crate::algebra::{Kernel, KernelRidgeClassifier};
use crate::arch::{DemoNet2d, Model};
use crate::error::{invalid, Result};
use crate::nn::{ActPlacement, BlockConfig, FusionMode};

/// Environment variable capping suite parallelism.
pub const THREADS_ENV: &str = "STARKERNEL_THREADS";

/// Worker count: `STARKERNEL_THREADS` if set to a positive integer, else the
/// available hardware parallelism.
pub fn thread_budget() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub model: String,
    pub placement: ActPlacement,
    pub final_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

/// Trains one freshly built model per placement with the same recipe.
pub fn ablate_activations<M, B>(
    mut build: B,
    placements: &[ActPlacement],
    data: &MoonsDataset,
    eval: &MoonsDataset,
    recipe: &TrainRecipe,
) -> Result<Vec<AblationRow>>
where
    M: Model,
    B: FnMut(ActPlacement) -> Result<M>,
{
    if placements.is_empty() {
        return Err(invalid("ablation needs at least one placement"));
    }
    placements
        .iter()
        .map(|&p| {
            let mut model = build(p)?;
            let h = train(&mut model, data, eval, recipe)?;
            let last = h.last().ok_or_else(|| invalid("ablation needs epochs ≥ 1"))?;
            Ok(AblationRow {
                model: model.name(),
                placement: p,
                final_loss: last.train_loss,
                train_acc: last.train_acc,
                eval_acc: last.eval_acc,
            })
        })
        .collect()
}

/// Settings of [`run_boundary_suite`].
#[derive(Clone, Debug, Serialize)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub n: usize,
    pub noise: f64,
    pub grid: GridSpec,
    /// Network recipe; its seed is replaced by each suite seed.
    pub recipe: TrainRecipe,
    pub poly: Kernel,
    pub rbf: Kernel,
    pub lambda: f64,
    /// Also train `k` star blocks followed by `4 − k` sum blocks, `k = 0..=4`.
    pub mixed: bool,
    pub threads: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3],
            n: 1000,
            noise: 0.2,
            grid: GridSpec::default(),
            recipe: TrainRecipe::moons(0),
            poly: Kernel::Polynomial {
                gamma: 1.0,
                c: 1.0,
                degree: 3,
            },
            rbf: Kernel::Gaussian { sigma: 0.5 },
            lambda: 1e-3,
            mixed: false,
            threads: thread_budget(),
        }
    }
}

/// Classifiers compared on every seed, in agreement-matrix order.
pub const SUITE_MODELS: [&str; 4] = ["star", "sum", "poly", "rbf"];

#[derive(Clone, Debug, Serialize)]
pub struct MixedRun {
    /// Leading blocks that use the star fusion.
    pub star_blocks: usize,
    pub eval_acc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// One grid per entry of [`SUITE_MODELS`].
    pub grids: Vec<BoundaryGrid>,
    pub eval_acc: Vec<f64>,
    /// `agreement[i][j]`: fraction of cells where models `i` and `j` agree.
    pub agreement: Vec<Vec<f64>>,
    pub histories: Vec<History>,
    pub mixed: Vec<MixedRun>,
}

impl SeedOutcome {
    fn index(name: &str) -> usize {
        SUITE_MODELS.iter().position(|&m| m == name).expect("suite model")
    }

    pub fn agreement_of(&self, a: &str, b: &str) -> f64 {
        self.agreement[Self::index(a)][Self::index(b)]
    }

    /// Whether the star network's boundary is closer to the polynomial
    /// kernel's than to the Gaussian kernel's.
    pub fn star_closer_to_poly(&self) -> bool {
        self.agreement_of("star", "poly") > self.agreement_of("star", "rbf")
    }
}

enum Job {
    Net(FusionMode),
    Kernel(Kernel),
    Mixed(usize),
}

enum JobOut {
    Grid(BoundaryGrid, f64, Option<History>),
    Mixed(MixedRun),
}

fn run_job(job: &Job, seed: u64, cfg: &SuiteConfig, data: &MoonsDataset, eval: &MoonsDataset) -> Result<JobOut> {
    let recipe = TrainRecipe { seed, ..cfg.recipe.clone() };
    match *job {
        Job::Net(fusion) => {
            let mut net = DemoNet2d::build(fusion, seed)?;
            let h = train(&mut net, data, eval, &recipe)?;
            let acc = h.last().map_or(0.0, |r| r.eval_acc);
            Ok(JobOut::Grid(boundary_eval(&mut net, &cfg.grid)?, acc, Some(h)))
        }
        Job::Kernel(k) => {
            let mut clf = KernelRidgeClassifier::fit(&data.points, &data.labels, k, cfg.lambda)?;
            let acc = clf.accuracy(&eval.points, &eval.labels)?;
            Ok(JobOut::Grid(boundary_eval(&mut clf, &cfg.grid)?, acc, None))
        }
        Job::Mixed(k) => {
            let blocks: Vec<BlockConfig> = (0..DemoNet2d::DEPTH)
                .map(|i| {
                    let f = if i < k { FusionMode::Star } else { FusionMode::Sum };
                    BlockConfig::demo_2d(DemoNet2d::WIDTH, f)
                })
                .collect();
            let mut net = DemoNet2d::new(&blocks, DemoNet2d::CLASSES, seed)?;
            let h = train(&mut net, data, eval, &recipe)?;
            Ok(JobOut::Mixed(MixedRun {
                star_blocks: k,
                eval_acc: h.last().map_or(0.0, |r| r.eval_acc),
            }))
        }
    }
}

/// Per seed: trains star and sum networks, fits polynomial and Gaussian
/// kernel ridge classifiers on the same data, evaluates all four on the grid
/// and tabulates pairwise agreement. Jobs run on up to `cfg.threads`
/// workers; results do not depend on the worker count.
pub fn run_boundary_suite(cfg: &SuiteConfig) -> Result<Vec<SeedOutcome>> {
    if cfg.seeds.is_empty() {
        return Err(invalid("boundary suite needs at least one seed"));
    }
    cfg.grid.validate()?;
    let datasets: Vec<(MoonsDataset, MoonsDataset)> = cfg
        .seeds
        .iter()
        .map(|&s| {
            let d = make_moons(cfg.n, cfg.noise, s)?;
            let e = eval_split(&d)?;
            Ok((d, e))
        })
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for si in 0..cfg.seeds.len() {
        jobs.push((si, Job::Net(FusionMode::Star)));
        jobs.push((si, Job::Net(FusionMode::Sum)));
        jobs.push((si, Job::Kernel(cfg.poly)));
        jobs.push((si, Job::Kernel(cfg.rbf)));
        if cfg.mixed {
            jobs.extend((0..=DemoNet2d::DEPTH).map(|k| (si, Job::Mixed(k))));
        }
    }
    let outs: Vec<Result<JobOut>> = pool(cfg.threads)?.install(|| {
        jobs.par_iter()
            .map(|(si, job)| {
                let (d, e) = &datasets[*si];
                run_job(job, cfg.seeds[*si], cfg, d, e)
            })
            .collect()
    });
    let mut outs = outs.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    let mut result = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut grids = Vec::new();
        let mut accs = Vec::new();
        let mut histories = Vec::new();
        let mut mixed = Vec::new();
        let per_seed = 4 + if cfg.mixed { DemoNet2d::DEPTH + 1 } else { 0 };
        for out in outs.by_ref().take(per_seed) {
            match out {
                JobOut::Grid(g, a, h) => {
                    grids.push(g);
                    accs.push(a);
                    histories.extend(h);
                }
                JobOut::Mixed(m) => mixed.push(m),
            }
        }
        let agreement = grids
            .iter()
            .map(|a| grids.iter().map(|b| a.agreement(b)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        result.push(SeedOutcome {
            seed,
            grids,
            eval_acc: accs,
            agreement,
            histories,
            mixed,
        });
    }
    Ok(result)
}
