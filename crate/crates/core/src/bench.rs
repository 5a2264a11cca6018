//! Element-wise multiply vs add latency on identical buffers.
//!
//! This is an operator-level stand-in for whole-model on-device latency: it
//! answers whether a star fusion costs more than a sum fusion on the same
//! activation shape, on whatever machine runs it.

use std::hint::black_box;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::arch::{star_op_shapes, StarVariant};
use crate::error::{invalid, Result};
use crate::rng::{self, streams};

pub const DEFAULT_ITERS: usize = 500;
pub const DEFAULT_WARMUP: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementwiseOp {
    Mul,
    Add,
}

impl ElementwiseOp {
    #[inline(never)]
    fn run(self, a: &[f64], b: &[f64], out: &mut [f64]) {
        match self {
            ElementwiseOp::Mul => out.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (x, y))| *o = x * y),
            ElementwiseOp::Add => out.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (x, y))| *o = x + y),
        }
    }
}

/// Timing of one op on one shape. Per-iteration times are in nanoseconds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub op: ElementwiseOp,
    pub shape: Vec<usize>,
    pub element_count: usize,
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub min_ns: f64,
    pub median_ns: f64,
    pub p90_ns: f64,
    pub mean_ns: f64,
    /// Median iteration time divided by the element count.
    pub ns_per_element: f64,
    /// Elements per second at the median.
    pub throughput: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub host: String,
}

/// Both ops on one shape, timed interleaved.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapeComparison {
    pub shape: Vec<usize>,
    pub mul: BenchResult,
    pub add: BenchResult,
    /// `median(mul) / median(add)`.
    pub ratio: f64,
}

impl ShapeComparison {
    pub fn within(&self, lo: f64, hi: f64) -> bool {
        (lo..=hi).contains(&self.ratio)
    }
}

pub fn host_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{}, {} hw threads", std::env::consts::OS, std::env::consts::ARCH, threads)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let k = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[k]
}

fn summarize(op: ElementwiseOp, shape: &[usize], mut times: Vec<f64>, warmup: usize) -> BenchResult {
    let n: usize = shape.iter().product();
    let mean_ns = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let median_ns = percentile(&times, 0.5).max(1e-3);
    BenchResult {
        op,
        shape: shape.to_vec(),
        element_count: n,
        iterations: times.len(),
        warmup_iterations: warmup,
        min_ns: times[0],
        median_ns,
        p90_ns: percentile(&times, 0.9),
        mean_ns,
        ns_per_element: median_ns / n as f64,
        throughput: n as f64 / median_ns * 1e9,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        host: host_descriptor(),
    }
}

fn check_shape(shape: &[usize], iters: usize) -> Result<usize> {
    let n: usize = shape.iter().product();
    if shape.is_empty() || n == 0 {
        return Err(invalid(format!("shape {shape:?} has no elements")));
    }
    if iters == 0 {
        return Err(invalid("iterations must be ≥ 1"));
    }
    Ok(n)
}

fn buffers(n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(0, streams::PROBE);
    let a = (0..n).map(|_| rng::uniform(&mut r, 0.5, 1.5)).collect();
    let b = (0..n).map(|_| rng::uniform(&mut r, 0.5, 1.5)).collect();
    (a, b, vec![0.0; n])
}

fn time_once(op: ElementwiseOp, a: &[f64], b: &[f64], out: &mut [f64]) -> f64 {
    let t = Instant::now();
    op.run(black_box(a), black_box(b), black_box(out));
    black_box(&out);
    t.elapsed().as_nanos() as f64
}

/// Times `op` alone over `iters` iterations after `warmup` untimed ones.
pub fn bench_elementwise(op: ElementwiseOp, shape: &[usize], iters: usize, warmup: usize) -> Result<BenchResult> {
    let n = check_shape(shape, iters)?;
    let (a, b, mut out) = buffers(n);
    for _ in 0..warmup {
        op.run(&a, &b, &mut out);
    }
    let times = (0..iters).map(|_| time_once(op, &a, &b, &mut out)).collect();
    Ok(summarize(op, shape, times, warmup))
}

/// Times mul and add on the same buffers, alternating every iteration so
/// that frequency drift and cache state affect both alike.
pub fn compare_shape(shape: &[usize], iters: usize, warmup: usize) -> Result<ShapeComparison> {
    let n = check_shape(shape, iters)?;
    let (a, b, mut out) = buffers(n);
    for _ in 0..warmup {
        ElementwiseOp::Mul.run(&a, &b, &mut out);
        ElementwiseOp::Add.run(&a, &b, &mut out);
    }
    let (mut tm, mut ta) = (Vec::with_capacity(iters), Vec::with_capacity(iters));
    for i in 0..iters {
        // Alternate which op goes first.
        if i % 2 == 0 {
            tm.push(time_once(ElementwiseOp::Mul, &a, &b, &mut out));
            ta.push(time_once(ElementwiseOp::Add, &a, &b, &mut out));
        } else {
            ta.push(time_once(ElementwiseOp::Add, &a, &b, &mut out));
            tm.push(time_once(ElementwiseOp::Mul, &a, &b, &mut out));
        }
    }
    let mul = summarize(ElementwiseOp::Mul, shape, tm, warmup);
    let add = summarize(ElementwiseOp::Add, shape, ta, warmup);
    Ok(ShapeComparison {
        shape: shape.to_vec(),
        ratio: mul.median_ns / add.median_ns,
        mul,
        add,
    })
}

/// Shapes at which StarNet-S4 applies its star operation, at 224² input.
pub fn starnet_s4_shapes() -> Result<Vec<Vec<usize>>> {
    Ok(star_op_shapes(&StarVariant::S4.config(), 224)?
        .into_iter()
        .map(|s| s.to_vec())
        .collect())
}

/// Parses `NxCxHxW` (any rank ≥ 1), e.g. `1x128x56x56`.
pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split(['x', 'X'])
        .map(|d| d.trim().parse::<usize>().map_err(|_| invalid(format!("bad shape {s:?}"))))
        .collect::<Result<_>>()?;
    if dims.iter().product::<usize>() == 0 {
        return Err(invalid(format!("shape {s:?} has no elements")));
    }
    Ok(dims)
}
