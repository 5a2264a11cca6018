//! Finite-difference suites over every differentiable op and block.
//!
//! Each case draws fresh random operands per trial, contracts the output with
//! random weights to a scalar, and hands it to [`gradcheck::check`]. Blocks
//! are checked with GELU so that no perturbation straddles a kink; the
//! piecewise-linear activations are covered op by op with inputs kept away
//! from their breakpoints.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::nn::{ActPlacement, BlockConfig, DemoBlock, ForwardCtx, FusionMode, Init, OneBranchBlock, StarBlock};
use crate::rng::{self, Rng};
use crate::tensor::gradcheck::{self, GradCheckReport};
use crate::tensor::{Activation, BnStats, ConvSpec, Graph, Layout, OpKind, ParamStore, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
/// Minimum distance of an activation input from a breakpoint.
const KINK_GAP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradSuiteRow {
    pub name: String,
    pub trials: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Case = (String, Box<dyn Fn(&mut Rng) -> Result<GradCheckReport>>);

fn randn(shape: &[usize], r: &mut Rng) -> Tensor {
    Tensor::randn(shape, r)
}

fn contract(g: &mut Graph, y: Var, r: &mut Rng) -> Result<Var> {
    let w = randn(g.value(y).shape(), r);
    g.weighted_sum(y, w)
}

/// Checks `f` on `inputs` with a random linear read-out of its output.
fn probe<F>(inputs: Vec<Tensor>, params: &mut ParamStore, r: &mut Rng, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var], &ParamStore) -> Result<Var>,
{
    // Same read-out weights on every re-evaluation.
    let seed: u64 = rand::Rng::random(r);
    gradcheck::check(&inputs, params, GRAD_EPS, |g, v, p| {
        let y = f(g, v, p)?;
        contract(g, y, &mut rng::stream(seed, 0))
    })
}

fn kinks(act: Activation) -> &'static [f64] {
    match act {
        Activation::ReLU | Activation::LeakyReLU => &[0.0],
        Activation::ReLU6 => &[0.0, 6.0],
        Activation::HardSwish => &[-3.0, 3.0],
        Activation::Identity | Activation::GELU => &[],
    }
}

fn away_from_kinks(shape: &[usize], act: Activation, r: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v = 4.0 * rng::normal(r);
        if kinks(act).iter().all(|k| (v - k).abs() > KINK_GAP) {
            return v;
        }
    })
}

fn conv_case(name: &str, x: [usize; 4], w: [usize; 4], spec: ConvSpec) -> Case {
    (
        name.into(),
        Box::new(move |r| {
            let ins = vec![randn(&x, r), randn(&w, r), randn(&[w[0]], r)];
            probe(ins, &mut ParamStore::new(), r, |g, v, _| g.conv2d(v[0], v[1], Some(v[2]), spec))
        }),
    )
}

fn op_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = vec![
        (
            "matmul".into(),
            Box::new(|r| {
                let ins = vec![randn(&[3, 4], r), randn(&[4, 5], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.matmul(v[0], v[1]))
            }),
        ),
        (
            "mul".into(),
            Box::new(|r| {
                let ins = vec![randn(&[4, 6], r), randn(&[4, 6], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.mul(v[0], v[1]))
            }),
        ),
        (
            "mul_self".into(),
            Box::new(|r| {
                let ins = vec![randn(&[4, 6], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.mul(v[0], v[0]))
            }),
        ),
        (
            "add".into(),
            Box::new(|r| {
                let ins = vec![randn(&[4, 6], r), randn(&[4, 6], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.add(v[0], v[1]))
            }),
        ),
        (
            "add_bias".into(),
            Box::new(|r| {
                let ins = vec![randn(&[3, 5], r), randn(&[5], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.add_bias(v[0], v[1]))
            }),
        ),
        (
            "scale".into(),
            Box::new(|r| {
                let factor = randn(&[4, 4], r);
                let ins = vec![randn(&[4, 4], r)];
                probe(ins, &mut ParamStore::new(), r, move |g, v, _| g.scale(v[0], factor.clone()))
            }),
        ),
        (
            "linear".into(),
            Box::new(|r| {
                let ins = vec![randn(&[2, 3, 4], r), randn(&[4, 3], r), randn(&[3], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.linear(v[0], v[1], Some(v[2])))
            }),
        ),
        conv_case("conv2d", [1, 2, 5, 5], [3, 2, 3, 3], ConvSpec::new(1, 1, 1)),
        conv_case("conv2d_stride2", [1, 2, 5, 5], [2, 2, 3, 3], ConvSpec::new(2, 1, 1)),
        conv_case("conv2d_depthwise", [1, 3, 4, 4], [3, 1, 3, 3], ConvSpec::new(1, 1, 3)),
        conv_case("conv2d_pointwise", [2, 3, 3, 3], [4, 3, 1, 1], ConvSpec::new(1, 0, 1)),
        (
            "layer_norm".into(),
            Box::new(|r| {
                let ins = vec![randn(&[3, 6], r), randn(&[6], r), randn(&[6], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.layer_norm(v[0], v[1], v[2], 1e-5))
            }),
        ),
        (
            "batch_norm_train".into(),
            Box::new(|r| {
                let ins = vec![randn(&[4, 3, 2, 2], r), randn(&[3], r), randn(&[3], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| {
                    g.batch_norm(v[0], v[1], v[2], &mut BnStats::new(3), true)
                })
            }),
        ),
        (
            "batch_norm_eval".into(),
            Box::new(|r| {
                let mut stats = BnStats::new(3);
                stats.running_mean = (0..3).map(|_| rng::normal(r)).collect();
                stats.running_var = (0..3).map(|_| rng::uniform(r, 0.5, 2.0)).collect();
                let ins = vec![randn(&[2, 3, 2, 2], r), randn(&[3], r), randn(&[3], r)];
                probe(ins, &mut ParamStore::new(), r, move |g, v, _| {
                    g.batch_norm(v[0], v[1], v[2], &mut stats.clone(), false)
                })
            }),
        ),
        (
            "mean_pool_channels_first".into(),
            Box::new(|r| {
                let ins = vec![randn(&[2, 3, 3, 3], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.mean_pool_spatial(v[0], Layout::ChannelsFirst))
            }),
        ),
        (
            "mean_pool_channels_last".into(),
            Box::new(|r| {
                let ins = vec![randn(&[2, 3, 3, 3], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.mean_pool_spatial(v[0], Layout::ChannelsLast))
            }),
        ),
        (
            "permute".into(),
            Box::new(|r| {
                let ins = vec![randn(&[2, 3, 4], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.permute(v[0], &[2, 0, 1]))
            }),
        ),
        (
            "reshape".into(),
            Box::new(|r| {
                let ins = vec![randn(&[3, 4], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.reshape(v[0], &[2, 6]))
            }),
        ),
        (
            "slice_last".into(),
            Box::new(|r| {
                let ins = vec![randn(&[3, 7], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.slice_last(v[0], 2, 3))
            }),
        ),
        (
            "sum".into(),
            Box::new(|r| {
                let ins = vec![randn(&[10], r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| {
                    let s = g.sum(v[0])?;
                    g.mul(s, s)
                })
            }),
        ),
        (
            "cross_entropy".into(),
            Box::new(|r| {
                let labels: Vec<usize> = (0..5).map(|_| rng::uniform(r, 0.0, 4.0) as usize).collect();
                let ins = vec![randn(&[5, 4], r)];
                probe(ins, &mut ParamStore::new(), r, move |g, v, _| g.cross_entropy(v[0], &labels))
            }),
        ),
    ];
    for act in [
        Activation::ReLU,
        Activation::ReLU6,
        Activation::GELU,
        Activation::LeakyReLU,
        Activation::HardSwish,
    ] {
        cases.push((
            format!("activation_{}", act.name()),
            Box::new(move |r| {
                let ins = vec![away_from_kinks(&[4, 8], act, r)];
                probe(ins, &mut ParamStore::new(), r, |g, v, _| g.activation(v[0], act))
            }),
        ));
    }
    cases
}

/// Overwrites every parameter with `N(0, 0.5²)` so that no gradient is
/// trivially tiny.
fn jitter(store: &mut ParamStore, r: &mut Rng) {
    for p in store.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng::normal(r));
    }
}

fn demo_case(fusion: FusionMode, placement: ActPlacement, conv: bool) -> Case {
    let name = format!(
        "demo_block_{}_{}{}",
        fusion.name(),
        placement.name(),
        if conv { "_conv" } else { "" }
    );
    (
        name,
        Box::new(move |r| {
            let cfg = BlockConfig {
                placement,
                use_conv: conv,
                ..BlockConfig::demo(4, fusion)
            };
            let mut store = ParamStore::new();
            let block = DemoBlock::new(&mut store, "b", cfg, Init::UniformFanIn, r)?;
            jitter(&mut store, r);
            let shape: &[usize] = if conv { &[1, 3, 3, 4] } else { &[4, 4] };
            let ins = vec![randn(shape, r)];
            probe(ins, &mut store, r, |g, v, s| block.forward(g, s, v[0]))
        }),
    )
}

fn star_case(fusion: FusionMode) -> Case {
    (
        format!("star_block_{}", fusion.name()),
        Box::new(move |r| {
            let cfg = BlockConfig {
                fusion,
                activation: Activation::GELU,
                ..BlockConfig::star(2, 2.0)
            };
            let mut store = ParamStore::new();
            let block = StarBlock::new(&mut store, "b", cfg, 0.0, r)?;
            jitter(&mut store, r);
            let ins = vec![randn(&[2, 2, 3, 3], r)];
            probe(ins, &mut store, r, |g, v, s| {
                block.clone().forward(g, s, v[0], &mut ForwardCtx::train(0))
            })
        }),
    )
}

fn block_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    for fusion in [FusionMode::Star, FusionMode::Sum] {
        for placement in ActPlacement::ALL {
            cases.push(demo_case(fusion, placement, false));
        }
        cases.push(demo_case(fusion, ActPlacement::One, true));
        cases.push(star_case(fusion));
    }
    cases.push((
        "one_branch_block".into(),
        Box::new(|r| {
            let mut store = ParamStore::new();
            let block = OneBranchBlock::new(&mut store, "b", 2, 3, Activation::GELU, r)?;
            jitter(&mut store, r);
            let ins = vec![randn(&[2, 2, 3, 3], r)];
            probe(ins, &mut store, r, |g, v, s| {
                block.clone().forward(g, s, v[0], &mut ForwardCtx::train(0))
            })
        }),
    ));
    cases
}

fn run(cases: Vec<Case>, trials: usize, seed: u64) -> Result<Vec<GradSuiteRow>> {
    if trials == 0 {
        return Err(invalid("gradient suite needs trials ≥ 1"));
    }
    cases
        .into_iter()
        .enumerate()
        .map(|(k, (name, case))| {
            let mut r = rng::stream(seed.wrapping_add(k as u64), rng::streams::PROBE);
            let mut total = GradCheckReport::default();
            for _ in 0..trials {
                total.merge(&case(&mut r)?);
            }
            Ok(GradSuiteRow {
                name,
                trials,
                checked: total.checked,
                max_rel_err: total.max_rel_err,
                passed: total.max_rel_err < GRAD_TOL,
            })
        })
        .collect()
}

/// One row per differentiable op.
pub fn op_gradchecks(trials: usize, seed: u64) -> Result<Vec<GradSuiteRow>> {
    run(op_cases(), trials, seed)
}

/// One row per block family and configuration.
pub fn block_gradchecks(trials: usize, seed: u64) -> Result<Vec<GradSuiteRow>> {
    run(block_cases(), trials, seed)
}

/// Op family by its lowercase name, for fault injection from the command line.
pub fn op_kind(name: &str) -> Option<OpKind> {
    Some(match name {
        "matmul" => OpKind::MatMul,
        "mul" => OpKind::Mul,
        "add" => OpKind::Add,
        "add_bias" => OpKind::AddBias,
        "scale" => OpKind::Scale,
        "conv2d" => OpKind::Conv2d,
        "layer_norm" => OpKind::LayerNorm,
        "batch_norm" => OpKind::BatchNorm,
        "activation" => OpKind::Activation,
        "mean_pool" => OpKind::MeanPool,
        "permute" => OpKind::Permute,
        "reshape" => OpKind::Reshape,
        "slice" => OpKind::Slice,
        "sum" => OpKind::Sum,
        "cross_entropy" => OpKind::CrossEntropy,
        _ => return None,
    })
}
