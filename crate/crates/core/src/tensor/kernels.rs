//! Raw numeric routines behind the graph ops. Everything here works on flat
//! row-major slices; shape checking happens in `graph.rs`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `c = op(a) · op(b) + beta · c` for row-major operands.
///
/// `a` is logically `m×k` and `b` is `k×n`. With `ta`/`tb` set the operand is
/// stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted on entry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stride, zero padding and channel groups of a 2D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Output extent for input extent `size` and kernel extent `k`.
    pub fn out_extent(&self, size: usize, k: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(invalid("convolution stride must be positive"));
        }
        let padded = size + 2 * self.padding;
        if padded < k {
            return Err(invalid(format!(
                "non-positive output extent: input {size} + 2·{} < kernel {k}",
                self.padding
            )));
        }
        Ok((padded - k) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    fn cg(&self) -> usize {
        self.c / self.spec.groups
    }
    fn og(&self) -> usize {
        self.o / self.spec.groups
    }
    fn kcols(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds the channels `c0..c0+cg` of one image (C×H×W) into `cols`
/// (cg·kh·kw rows, ho·wo columns).
fn im2col(x: &[f64], g: &ConvGeom, c0: usize, cols: &mut [f64]) {
    let (h, w, p) = (g.h as isize, g.w as isize, g.p());
    let (s, pad) = (g.spec.stride as isize, g.spec.padding as isize);
    let mut row = 0;
    for c in c0..c0 + g.cg() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh as isize {
            for kj in 0..g.kw as isize {
                let dst = &mut cols[row * p..(row + 1) * p];
                let mut idx = 0;
                for oi in 0..g.ho as isize {
                    let ii = oi * s - pad + ki;
                    for oj in 0..g.wo as isize {
                        let jj = oj * s - pad + kj;
                        dst[idx] = if ii >= 0 && ii < h && jj >= 0 && jj < w {
                            plane[(ii * w + jj) as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, c0: usize, dx: &mut [f64]) {
    let (h, w, p) = (g.h as isize, g.w as isize, g.p());
    let (s, pad) = (g.spec.stride as isize, g.spec.padding as isize);
    let mut row = 0;
    for c in c0..c0 + g.cg() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh as isize {
            for kj in 0..g.kw as isize {
                let src = &cols[row * p..(row + 1) * p];
                let mut idx = 0;
                for oi in 0..g.ho as isize {
                    let ii = oi * s - pad + ki;
                    for oj in 0..g.wo as isize {
                        let jj = oj * s - pad + kj;
                        if ii >= 0 && ii < h && jj >= 0 && jj < w {
                            plane[(ii * w + jj) as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (og, kc, p) = (g.og(), g.kcols(), g.p());
    let mut out = vec![0.0; g.n * g.o * p];
    let mut cols = vec![0.0; kc * p];
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        for grp in 0..g.spec.groups {
            im2col(xn, g, grp * g.cg(), &mut cols);
            let wg = &w[grp * og * kc..(grp + 1) * og * kc];
            let o0 = n * g.o * p + grp * og * p;
            gemm(og, kc, p, wg, false, &cols, false, 0.0, &mut out[o0..o0 + og * p]);
        }
        if let Some(b) = b {
            for (o, bias) in b.iter().enumerate() {
                let o0 = n * g.o * p + o * p;
                out[o0..o0 + p].iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (og, kc, p) = (g.og(), g.kcols(), g.p());
    let mut dx = if want_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.o];
    let mut cols = vec![0.0; kc * p];
    let mut dcols = vec![0.0; kc * p];
    for n in 0..g.n {
        let xn = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        for grp in 0..g.spec.groups {
            let o0 = n * g.o * p + grp * og * p;
            let dg = &dout[o0..o0 + og * p];
            im2col(xn, g, grp * g.cg(), &mut cols);
            let wr = grp * og * kc..(grp + 1) * og * kc;
            gemm(og, p, kc, dg, false, &cols, true, 1.0, &mut dw[wr.clone()]);
            if want_dx {
                gemm(kc, og, p, &w[wr], true, dg, false, 0.0, &mut dcols);
                let dxn = &mut dx[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
                col2im_add(&dcols, g, grp * g.cg(), dxn);
            }
        }
        for (o, acc) in db.iter_mut().enumerate() {
            let o0 = n * g.o * p + o * p;
            *acc += dout[o0..o0 + p].iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    ReLU,
    ReLU6,
    /// Exact form `x/2 · (1 + erf(x/√2))`.
    GELU,
    /// Negative slope 0.01.
    LeakyReLU,
    /// `x · ReLU6(x + 3) / 6`.
    HardSwish,
}

const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::ReLU => x.max(0.0),
            Activation::ReLU6 => x.max(0.0).min(6.0),
            Activation::GELU => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::LeakyReLU => x.max(LEAKY_SLOPE * x),
            Activation::HardSwish => x * (x + 3.0).max(0.0).min(6.0) / 6.0,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::ReLU6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::GELU => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::LeakyReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::HardSwish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::ReLU => "relu",
            Activation::ReLU6 => "relu6",
            Activation::GELU => "gelu",
            Activation::LeakyReLU => "leaky_relu",
            Activation::HardSwish => "hardswish",
        }
    }
}

/// Spatial layout of a rank-4 feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `[N, C, H, W]`
    ChannelsFirst,
    /// `[N, H, W, C]`
    ChannelsLast,
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnStats {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    /// Replaces the running statistics with one batch's mean and biased
    /// variance, so eval mode reproduces train mode on that batch.
    pub fn set_from_batch(&mut self, mean: Vec<f64>, var: Vec<f64>) {
        self.running_mean = mean;
        self.running_var = var;
    }
}

/// Per-group mean and biased variance of `x` viewed as `[outer, groups, inner]`
/// and reduced over `outer` and `inner`.
pub(crate) fn channel_moments(x: &[f64], groups: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
    let outer = x.len() / (groups * inner);
    let m = (outer * inner) as f64;
    let mut mean = vec![0.0; groups];
    for o in 0..outer {
        for c in 0..groups {
            let s = &x[(o * groups + c) * inner..(o * groups + c + 1) * inner];
            mean[c] += s.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; groups];
    for o in 0..outer {
        for c in 0..groups {
            let s = &x[(o * groups + c) * inner..(o * groups + c + 1) * inner];
            var[c] += s.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[idx] = x[idx permuted]` where output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
