use starkernel::tensor::{ConvSpec, Tensor};

/// Direct seven-loop convolution, zero padding, grouped channels.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], spec: ConvSpec) -> Vec<f64> {
    let (n, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (o, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let og = o / spec.groups;
    let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
    let at = |t: &Tensor, i: [usize; 4]| {
        let s = t.shape();
        t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
    };
    let mut out = Vec::with_capacity(n * o * ho * wo);
    for bi in 0..n {
        for oc in 0..o {
            let group = oc / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[oc];
                    for ic in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xin = at(x, [bi, group * cg + ic, iy as usize, ix as usize]);
                                acc += xin * at(w, [oc, ic, ky, kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}
