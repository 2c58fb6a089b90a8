use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride and symmetric zero padding of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec { stride, padding }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Conv2dSpec { stride: 1, padding: kernel / 2 }
    }
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output positions `lo..hi` whose input index `o * stride + off - pad` lands inside `0..len`.
fn valid_span(off: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if len + pad > off { ((len + pad - off - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (ylo, yhi) = valid_span(ki, g.pad, g.stride, g.h, g.ho);
            for kj in 0..g.k {
                let (xlo, xhi) = valid_span(kj, g.pad, g.stride, g.w, g.wo);
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                dst[..ylo * g.wo].fill(T::ZERO);
                dst[yhi * g.wo..].fill(T::ZERO);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    line[..xlo].fill(T::ZERO);
                    line[xhi..].fill(T::ZERO);
                    if xlo == xhi {
                        continue;
                    }
                    let x0 = xlo * g.stride + kj - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        line[xlo..xhi].copy_from_slice(&src[x0..x0 + xhi - xlo]);
                    } else {
                        for (d, s) in line[xlo..xhi].iter_mut().zip(src[x0..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry, x: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (ylo, yhi) = valid_span(ki, g.pad, g.stride, g.h, g.ho);
            for kj in 0..g.k {
                let (xlo, xhi) = valid_span(kj, g.pad, g.stride, g.w, g.wo);
                if xlo == xhi {
                    continue;
                }
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                let x0 = xlo * g.stride + kj - g.pad;
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let line = &src[oy * g.wo + xlo..oy * g.wo + xhi];
                    let dst = &mut plane[iy * g.w + x0..(iy + 1) * g.w];
                    if g.stride == 1 {
                        for (d, s) in dst.iter_mut().zip(line) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in dst.iter_mut().step_by(g.stride).zip(line) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 2-D convolution (cross-correlation) of `N x Cin x H x W` input with
    /// `Cout x Cin x K x K` weights and optional per-output-channel bias.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, spec: Conv2dSpec) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (n, c_in, h, wd) = x.dims4();
        let ws = w.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[1], c_in, "conv weight expects {} input channels, got {c_in}", ws[1]);
        assert_eq!(ws[2], ws[3], "only square kernels are supported");
        let (c_out, k) = (ws[0], ws[2]);
        assert!(h + 2 * spec.padding >= k && wd + 2 * spec.padding >= k, "input smaller than kernel");
        let geo = Geometry {
            c_in,
            h,
            w: wd,
            k,
            stride: spec.stride,
            pad: spec.padding,
            ho: (h + 2 * spec.padding - k) / spec.stride + 1,
            wo: (wd + 2 * spec.padding - k) / spec.stride + 1,
        };
        let (rows, cols) = (geo.rows(), geo.cols());
        let in_per = c_in * h * wd;
        let out_per = c_out * cols;

        let b = bias.map(|b| {
            let bv = b.value();
            assert_eq!(bv.numel(), c_out, "conv bias length mismatch");
            bv
        });
        let mut out = vec![T::ZERO; n * out_per];
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::ZERO; rows * cols] };
        for img in 0..n {
            let xi = &x.data()[img * in_per..(img + 1) * in_per];
            let src: &[T] = if geo.is_pointwise() {
                xi
            } else {
                im2col(xi, &geo, &mut col);
                &col
            };
            let dst = &mut out[img * out_per..(img + 1) * out_per];
            if let Some(b) = &b {
                for (co, chunk) in dst.chunks_mut(cols).enumerate() {
                    chunk.fill(b.data()[co]);
                }
            }
            let beta = if b.is_some() { T::ONE } else { T::ZERO };
            T::gemm(c_out, rows, cols, T::ONE, w.data(), (rows, 1), src, (cols, 1), beta, dst, (cols, 1));
        }
        let value = Tensor::new(vec![n, c_out, geo.ho, geo.wo], out);

        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.push_op(value, &parents, move |flags| {
            let (fx, fw) = (flags[0], flags[1]);
            let fb = flags.get(2).copied().unwrap_or(false);
            let has_bias = flags.len() == 3;
            Box::new(move |g| {
                let gd = g.data();
                let mut gx = fx.then(|| vec![T::ZERO; n * in_per]);
                let mut gw = fw.then(|| vec![T::ZERO; c_out * rows]);
                let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::ZERO; rows * cols] };
                let mut gcol = vec![T::ZERO; if fx { rows * cols } else { 0 }];
                for img in 0..n {
                    let gi = &gd[img * out_per..(img + 1) * out_per];
                    if let Some(gw) = gw.as_mut() {
                        let xi = &x.data()[img * in_per..(img + 1) * in_per];
                        let src: &[T] = if geo.is_pointwise() {
                            xi
                        } else {
                            im2col(xi, &geo, &mut col);
                            &col
                        };
                        // gw += g_i * col^T
                        T::gemm(c_out, cols, rows, T::ONE, gi, (cols, 1), src, (1, cols), T::ONE, gw, (rows, 1));
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxi = &mut gx[img * in_per..(img + 1) * in_per];
                        if geo.is_pointwise() {
                            // gx_i = W^T * g_i
                            T::gemm(rows, c_out, cols, T::ONE, w.data(), (1, rows), gi, (cols, 1), T::ZERO, gxi, (cols, 1));
                        } else {
                            T::gemm(rows, c_out, cols, T::ONE, w.data(), (1, rows), gi, (cols, 1), T::ZERO, &mut gcol, (cols, 1));
                            col2im(&gcol, &geo, gxi);
                        }
                    }
                }
                let gb = fb.then(|| {
                    let mut acc = vec![0.0f64; c_out];
                    for img in 0..n {
                        for (co, a) in acc.iter_mut().enumerate() {
                            let off = img * out_per + co * cols;
                            *a += gd[off..off + cols].iter().map(|v| v.to_f64()).sum::<f64>();
                        }
                    }
                    Tensor::new(vec![c_out], acc.into_iter().map(T::from_f64).collect())
                });
                let mut res = vec![
                    gx.map(|d| Tensor::new(vec![n, c_in, h, wd], d)),
                    gw.map(|d| Tensor::new(ws.clone(), d)),
                ];
                if has_bias {
                    res.push(gb);
                }
                res
            })
        })
    }

    /// Fully connected layer: `B x I` input, `O x I` weight, `O` bias.
    pub fn linear(self, weight: Var<'g, T>, bias: Var<'g, T>) -> Var<'g, T> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        assert_eq!(x.shape().len(), 2, "linear input must be B x I");
        let (batch, inp) = (x.shape()[0], x.shape()[1]);
        let (outp, w_in) = (w.shape()[0], w.shape()[1]);
        assert_eq!(w_in, inp, "linear weight expects {w_in} inputs, got {inp}");
        assert_eq!(b.numel(), outp, "linear bias length mismatch");
        let mut out = Vec::with_capacity(batch * outp);
        for _ in 0..batch {
            out.extend_from_slice(b.data());
        }
        T::gemm(batch, inp, outp, T::ONE, x.data(), (inp, 1), w.data(), (1, inp), T::ONE, &mut out, (outp, 1));
        let value = Tensor::new(vec![batch, outp], out);
        let w_shape = w.shape().to_vec();
        self.graph.push_op(value, &[self, weight, bias], move |flags| {
            let (fx, fw, fb) = (flags[0], flags[1], flags[2]);
            Box::new(move |g| {
                let gx = fx.then(|| {
                    let mut d = vec![T::ZERO; batch * inp];
                    T::gemm(batch, outp, inp, T::ONE, g.data(), (outp, 1), w.data(), (inp, 1), T::ZERO, &mut d, (inp, 1));
                    Tensor::new(vec![batch, inp], d)
                });
                let gw = fw.then(|| {
                    let mut d = vec![T::ZERO; outp * inp];
                    T::gemm(outp, batch, inp, T::ONE, g.data(), (1, outp), x.data(), (inp, 1), T::ZERO, &mut d, (inp, 1));
                    Tensor::new(w_shape.clone(), d)
                });
                let gb = fb.then(|| {
                    let mut acc = vec![0.0f64; outp];
                    for row in g.data().chunks(outp) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v.to_f64();
                        }
                    }
                    Tensor::new(vec![outp], acc.into_iter().map(T::from_f64).collect())
                });
                vec![gx, gw, gb]
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4();
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for img in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((img * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + c) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out[((img * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, co, ho, wo], out)
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_forward_matches_naive() {
        for &(k, stride, pad) in &[(3, 1, 1), (5, 2, 2), (1, 1, 0), (3, 2, 1), (2, 2, 0), (3, 3, 2), (2, 1, 3)] {
            let x = Tensor::new(vec![2, 3, 7, 6], pseudo(2 * 3 * 42, 1));
            let w = Tensor::new(vec![4, 3, k, k], pseudo(4 * 3 * k * k, 2));
            let b = pseudo(4, 3);
            let g = Graph::<f64>::new();
            let y = g
                .constant(x.clone())
                .conv2d(g.constant(w.clone()), Some(g.constant(Tensor::new(vec![4], b.clone()))), Conv2dSpec::new(stride, pad));
            let want = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.value().data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = Tensor::new(vec![2, 2, 5, 4], pseudo(80, 7));
            let w = Tensor::new(vec![3, 2, k, k], pseudo(6 * k * k, 8));
            let b = Tensor::new(vec![3], pseudo(3, 9));
            let (ho, wo) = ((5 + 2 * pad - k) / stride + 1, (4 + 2 * pad - k) / stride + 1);
            let coef = Tensor::new(vec![2, 3, ho, wo], pseudo(2 * 3 * ho * wo, 10));
            let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                let y = naive_conv(x, w, b.data(), stride, pad);
                y.data().iter().zip(coef.data()).map(|(a, c)| a * c).sum::<f64>()
            };
            let g = Graph::<f64>::new();
            let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
            let y = xv.conv2d(wv, Some(bv), Conv2dSpec::new(stride, pad));
            let loss = y.mul(g.constant(coef.clone())).sum();
            let grads = g.backward(loss);
            let h = 1e-6;
            for (which, base) in [(0, &x), (1, &w), (2, &b)] {
                let analytic = grads.get([xv, wv, bv][which]).unwrap();
                for i in 0..base.numel() {
                    let mut p = base.clone();
                    let mut m = base.clone();
                    p.data_mut()[i] += h;
                    m.data_mut()[i] -= h;
                    let (fp, fm) = match which {
                        0 => (f(&p, &w, &b), f(&m, &w, &b)),
                        1 => (f(&x, &p, &b), f(&x, &m, &b)),
                        _ => (f(&x, &w, &p), f(&x, &w, &m)),
                    };
                    let fd = (fp - fm) / (2.0 * h);
                    assert!((analytic.data()[i] - fd).abs() < 1e-6, "param {which} index {i}");
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for &(k, stride, pad) in &[(3, 1, 1), (5, 2, 2), (2, 2, 0), (3, 3, 2), (4, 1, 5)] {
            let (h, w) = (7, 5);
            let geo = Geometry { c_in: 2, h, w, k, stride, pad, ho: (h + 2 * pad - k) / stride + 1, wo: (w + 2 * pad - k) / stride + 1 };
            let x = pseudo(2 * h * w, 11);
            let c = pseudo(geo.rows() * geo.cols(), 12);
            let mut col = vec![f64::NAN; c.len()];
            im2col(&x, &geo, &mut col);
            let mut back = vec![0.0; x.len()];
            col2im(&c, &geo, &mut back);
            let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "k={k} stride={stride} pad={pad}");
        }
    }

    #[test]
    fn linear_matches_manual() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let w = g.param(Tensor::new(vec![2, 3], vec![0.5, 0.0, 1.0, 1.0, 1.0, 1.0]));
        let b = g.param(Tensor::new(vec![2], vec![0.1, -0.1]));
        let y = x.linear(w, b);
        for (a, b) in y.value().data().iter().zip([3.6, 5.9, 0.6, -0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
        let grads = g.backward(y.sum());
        assert_eq!(grads.get(x).unwrap().data(), &[1.5, 1.0, 2.0, 1.5, 1.0, 2.0]);
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 2.0, 4.0, 0.0, 2.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0]);
    }
}
