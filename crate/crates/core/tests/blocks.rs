use starkernel::arch::CostReport;
use starkernel::nn::*;
use starkernel::rng::{self, Rng};
use starkernel::tensor::gradcheck::check;
use starkernel::tensor::{Activation, Graph, ParamStore, Tensor, Var};
use starkernel::verify::{block_gradchecks, GRAD_EPS, GRAD_TOL};

fn jitter(store: &mut ParamStore, r: &mut Rng, std: f64) {
    for p in store.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = std * rng::normal(r));
    }
}

fn zero(store: &mut ParamStore, prefixes: &[&str]) {
    for p in prefixes {
        assert!(store.zero_prefix(p) > 0, "{p}");
    }
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap()
}

fn star_block(cfg: BlockConfig, seed: u64) -> (ParamStore, StarBlock) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, 0);
    let block = StarBlock::new(&mut store, "b", cfg, 0.0, &mut r).unwrap();
    jitter(&mut store, &mut r, 0.3);
    (store, block)
}

fn run_star(block: &mut StarBlock, store: &ParamStore, x: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = block.forward(&mut g, store, xv, ctx).unwrap();
    g.value(y).clone()
}

/// Running statistics far from the defaults, so folding has work to do.
fn scramble_stats(bn: &mut BatchNorm, r: &mut Rng) {
    let c = bn.channels();
    bn.stats.running_mean = (0..c).map(|_| rng::normal(r)).collect();
    bn.stats.running_var = (0..c).map(|_| rng::uniform(r, 0.3, 3.0)).collect();
}

#[test]
fn block_suite_passes() {
    for row in block_gradchecks(10, 5).unwrap() {
        assert!(row.passed, "{}: {:e}", row.name, row.max_rel_err);
    }
}

#[test]
fn demo_block_gradient_at_width_eight() {
    for conv in [true, false] {
        let mut r = rng::stream(1, 0);
        let cfg = BlockConfig {
            use_conv: conv,
            ..BlockConfig::demo(8, FusionMode::Star)
        };
        let mut store = ParamStore::new();
        let block = DemoBlock::new(&mut store, "b", cfg, Init::UniformFanIn, &mut r).unwrap();
        jitter(&mut store, &mut r, 0.3);
        let shape: &[usize] = if conv { &[1, 3, 3, 8] } else { &[3, 8] };
        let x = Tensor::randn(shape, &mut r);
        let rep = check(&[x], &mut store, GRAD_EPS, |g, v, s| {
            let y = block.forward(g, s, v[0])?;
            let sq = g.mul(y, y)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(rep.max_rel_err < GRAD_TOL, "conv={conv}: {:e}", rep.max_rel_err);
    }
}

#[test]
fn star_block_gradient_at_width_eight() {
    let cfg = BlockConfig {
        activation: Activation::GELU,
        ..BlockConfig::star(8, 4.0)
    };
    let (mut store, block) = star_block(cfg, 2);
    let x = Tensor::randn(&[2, 8, 3, 3], &mut rng::stream(2, 1));
    let rep = check(&[x], &mut store, GRAD_EPS, |g, v, s| {
        let y = block.clone().forward(g, s, v[0], &mut ForwardCtx::train(0))?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(rep.max_rel_err < GRAD_TOL, "{:e}", rep.max_rel_err);
}

#[test]
fn demo_block_without_branches_is_the_identity() {
    let mut r = rng::stream(3, 0);
    for cfg in [BlockConfig::demo(8, FusionMode::Star), BlockConfig::demo_2d(8, FusionMode::Sum)] {
        let mut store = ParamStore::new();
        let block = DemoBlock::new(&mut store, "b", cfg, Init::UniformFanIn, &mut r).unwrap();
        zero(&mut store, &["b.f.", "b.g."]);
        let shape: &[usize] = if cfg.use_conv { &[2, 3, 3, 8] } else { &[5, 8] };
        let x = Tensor::randn(shape, &mut r);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = block.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }
}

#[test]
fn star_block_without_branches_is_the_identity() {
    let (mut store, mut block) = star_block(BlockConfig::star(8, 4.0), 4);
    zero(&mut store, &["b.f1.", "b.f2.", "b.g.", "b.dwconv2.", "b.bn2.bias"]);
    let x = Tensor::randn(&[2, 8, 4, 4], &mut rng::stream(4, 1));
    for mut ctx in [ForwardCtx::train(0), ForwardCtx::eval()] {
        let y = run_star(&mut block, &store, &x, &mut ctx);
        assert!(max_diff(&y, &x) < 1e-12);
    }
}

#[test]
fn folded_batch_norm_matches_unfolded() {
    let mut r = rng::stream(5, 0);
    let (mut store, mut block) = star_block(BlockConfig::star(8, 4.0), 5);
    scramble_stats(&mut block.bn, &mut r);
    scramble_stats(&mut block.bn2, &mut r);
    let x = Tensor::randn(&[2, 8, 5, 5], &mut r);
    let before = run_star(&mut block, &store, &x, &mut ForwardCtx::eval());
    block.fold_bn(&mut store).unwrap();
    assert!(block.is_folded());
    let after = run_star(&mut block, &store, &x, &mut ForwardCtx::eval());
    assert!(max_diff(&before, &after) < 1e-9);
    assert!(block.fold_bn(&mut store).is_err());
    let mut g = Graph::new();
    let xv = g.input(x);
    assert!(block.forward(&mut g, &store, xv, &mut ForwardCtx::train(0)).is_err());
}

#[test]
fn calibrated_statistics_make_eval_match_train() {
    let (store, mut block) = star_block(BlockConfig::star(8, 4.0), 6);
    let x = Tensor::randn(&[16, 8, 4, 4], &mut rng::stream(6, 1));
    run_star(&mut block, &store, &x, &mut ForwardCtx::calibrate());
    let eval = run_star(&mut block, &store, &x, &mut ForwardCtx::eval());
    let train = run_star(&mut block.clone(), &store, &x, &mut ForwardCtx::train(0));
    assert!(max_diff(&eval, &train) < 1e-6);
}

fn superposition_gap(fusion: FusionMode, placement: ActPlacement) -> f64 {
    let cfg = BlockConfig {
        fusion,
        placement,
        ..BlockConfig::star(4, 4.0)
    };
    let (store, mut block) = star_block(cfg, 7);
    let mut r = rng::stream(7, 1);
    let a = Tensor::randn(&[1, 4, 3, 3], &mut r);
    let b = Tensor::randn(&[1, 4, 3, 3], &mut r);
    let ab = Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]);
    let z = Tensor::zeros(a.shape());
    let mut f = |x: &Tensor| run_star(&mut block, &store, x, &mut ForwardCtx::eval());
    let (fab, fa, fb, f0) = (f(&ab), f(&a), f(&b), f(&z));
    (0..fab.len())
        .map(|i| (fab.data()[i] - fa.data()[i] - fb.data()[i] + f0.data()[i]).abs())
        .fold(0.0, f64::max)
}

#[test]
fn star_without_activations_is_still_nonlinear() {
    assert!(superposition_gap(FusionMode::Star, ActPlacement::None) > 1e-3);
    // The sum counterpart is affine in eval mode.
    assert!(superposition_gap(FusionMode::Sum, ActPlacement::None) < 1e-12);
}

#[test]
fn placements_give_four_distinct_star_blocks() {
    let x = Tensor::randn(&[2, 4, 3, 3], &mut rng::stream(8, 1));
    let outs: Vec<Tensor> = ActPlacement::ALL
        .iter()
        .map(|&placement| {
            let cfg = BlockConfig {
                placement,
                ..BlockConfig::star(4, 4.0)
            };
            let (store, mut block) = star_block(cfg, 8);
            run_star(&mut block, &store, &x, &mut ForwardCtx::eval())
        })
        .collect();
    for i in 0..4 {
        for j in i + 1..4 {
            assert!(max_diff(&outs[i], &outs[j]) > 0.0, "{i} vs {j}");
        }
    }
}

fn one_branch(store: &ParamStore, star: &OneBranchStar, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = star.forward(&mut g, store, xv).unwrap();
    g.value(y).clone()
}

#[test]
fn one_branch_star_special_cases() {
    let mut r = rng::stream(9, 0);
    let mut store = ParamStore::new();
    let star = OneBranchStar::new(&mut store, "s", 4, 6, Activation::ReLU6, &mut r).unwrap();
    jitter(&mut store, &mut r, 0.5);
    let z = Tensor::zeros(&[1, 4, 3, 3]);
    assert!(one_branch(&store, &star, &z).data().iter().all(|&v| v == 0.0));

    let mut store = ParamStore::new();
    let star = OneBranchStar::new(&mut store, "s", 4, 4, Activation::Identity, &mut r).unwrap();
    let eye = Tensor::from_fn(&[4, 4, 1, 1], |i| f64::from(i / 4 == i % 4));
    for w in [star.w1.weight, star.w2.weight] {
        *store.value_mut(w) = eye.clone();
    }
    store.zero_prefix("s.w1.bias");
    store.zero_prefix("s.w2.bias");
    let x = Tensor::randn(&[2, 4, 3, 3], &mut r);
    let sq = Tensor::from_fn(x.shape(), |i| x.data()[i] * x.data()[i]);
    assert!(max_diff(&one_branch(&store, &star, &x), &sq) < 1e-15);
}

#[test]
fn one_branch_block_matches_the_two_branch_cost() {
    for dim in [24, 32, 64, 128] {
        let mut r = rng::stream(10, 0);
        let mut store = ParamStore::new();
        let two = StarBlock::new(&mut store, "a", BlockConfig::star(dim, 4.0), 0.0, &mut r).unwrap();
        let hidden = one_branch_hidden(dim, 4.0).unwrap();
        let one = OneBranchBlock::new(&mut store, "b", dim, hidden, Activation::ReLU6, &mut r).unwrap();
        let input = [1, dim, 14, 14];
        let (mut a, mut b) = (CostReport::new(&input), CostReport::new(&input));
        two.cost("a", &input, &mut a).unwrap();
        one.cost("b", &input, &mut b).unwrap();
        let rel = (a.total_macs as f64 - b.total_macs as f64).abs() / a.total_macs as f64;
        assert!(rel < 0.01, "dim {dim}: {} vs {}", a.total_macs, b.total_macs);
    }
}

#[test]
fn square_fusion_values_and_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![0.0, 1.0, -3.0]));
    let y = square_fusion(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 9.0]);

    let t = Tensor::randn(&[3, 4], &mut rng::stream(11, 0));
    let rep = check(&[t.clone()], &mut ParamStore::new(), GRAD_EPS, |g, v, _| {
        let y = square_fusion(g, v[0])?;
        g.sum(y)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-8);
    let mut g = Graph::new();
    let xv: Var = g.input_with_grad(t.clone());
    let y = square_fusion(&mut g, xv).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s, &mut ParamStore::new()).unwrap();
    let expected: Vec<f64> = t.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(grads.wrt(xv).unwrap(), &expected[..]);
}

#[test]
fn pointwise_conv_layer_equals_linear_layer() {
    let mut r = rng::stream(12, 0);
    let mut store = ParamStore::new();
    let conv = Conv2d::pointwise(&mut store, "c", 5, 7, &mut r).unwrap();
    let lin = Linear::new(&mut store, "l", 5, 7, true, Init::UniformFanIn, &mut r).unwrap();
    // Copy the conv weights [7, 5, 1, 1] into the linear layout [5, 7].
    let cw = store.value(conv.weight).clone();
    *store.value_mut(lin.weight) = Tensor::from_fn(&[5, 7], |k| cw.data()[(k % 7) * 5 + k / 7]);
    let cb = store.value(conv.bias.unwrap()).clone();
    *store.value_mut(lin.bias.unwrap()) = cb;
    let x = Tensor::randn(&[2, 5, 3, 3], &mut r);
    let mut g = Graph::new();
    let xv = g.input(x);
    let a = conv.forward(&mut g, &store, xv).unwrap();
    let xl = g.permute(xv, &[0, 2, 3, 1]).unwrap();
    let b = lin.forward(&mut g, &store, xl).unwrap();
    let b = g.permute(b, &[0, 3, 1, 2]).unwrap();
    assert!(max_diff(g.value(a), g.value(b)) < 1e-12);
}

#[test]
fn expansion_must_give_an_integer_width() {
    let mut store = ParamStore::new();
    let cfg = BlockConfig::star(5, 0.5);
    assert!(StarBlock::new(&mut store, "b", cfg, 0.0, &mut rng::stream(0, 0)).is_err());
    assert!(StarBlock::new(&mut store, "c", BlockConfig::star(4, 4.0), 1.0, &mut rng::stream(0, 0)).is_err());
}
