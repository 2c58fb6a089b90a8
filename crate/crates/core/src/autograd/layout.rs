use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source row/column for reflective padding (edge sample not repeated).
fn reflect(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * (len - 1) - i
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::ZERO; n * c * ho * wo];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let a = src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1];
                    let b = src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * wo + xx] = (a + b) * quarter;
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out);
        self.graph.push_op(value, &[self], move |_| {
            Box::new(move |g| {
                let mut gx = vec![T::ZERO; n * c * h * w];
                for p in 0..n * c {
                    let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], gx))]
            })
        })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::ZERO; n * c * ho * wo];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out);
        self.graph.push_op(value, &[self], move |_| {
            Box::new(move |g| {
                let mut gx = vec![T::ZERO; n * c * h * w];
                for p in 0..n * c {
                    let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..ho {
                        for xx in 0..wo {
                            dst[(y / 2) * w + xx / 2] += src[y * wo + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], gx))]
            })
        })
    }

    /// Spatial mean, `N x C x H x W -> N x C`.
    pub fn global_avg_pool(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let inv = 1.0 / hw as f64;
        let out: Vec<T> = x
            .data()
            .chunks(hw)
            .map(|p| T::from_f64(p.iter().map(|v| v.to_f64()).sum::<f64>() * inv))
            .collect();
        let value = Tensor::new(vec![n, c], out);
        self.graph.push_op(value, &[self], move |_| {
            Box::new(move |g| {
                let inv = T::from_f64(inv);
                let mut gx = Vec::with_capacity(n * c * hw);
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                vec![Some(Tensor::new(vec![n, c, h, w], gx))]
            })
        })
    }

    /// Channel concatenation of two `N x C x H x W` tensors.
    pub fn concat_channels(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels shape mismatch");
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for img in 0..n {
            out.extend_from_slice(&a.data()[img * pa..(img + 1) * pa]);
            out.extend_from_slice(&b.data()[img * pb..(img + 1) * pb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out);
        self.graph.push_op(value, &[self, other], move |flags| {
            let (fa, fb) = (flags[0], flags[1]);
            Box::new(move |g| {
                let split = |first: bool| {
                    let (off, len, c) = if first { (0, pa, ca) } else { (pa, pb, cb) };
                    let mut d = Vec::with_capacity(n * len);
                    for img in 0..n {
                        let base = img * (pa + pb) + off;
                        d.extend_from_slice(&g.data()[base..base + len]);
                    }
                    Tensor::new(vec![n, c, h, w], d)
                };
                vec![fa.then(|| split(true)), fb.then(|| split(false))]
            })
        })
    }

    /// Reflective padding on the bottom and right edges.
    pub fn reflect_pad(self, bottom: usize, right: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(bottom < h && right < w, "reflect padding must be smaller than the input");
        if bottom == 0 && right == 0 {
            return self;
        }
        let (ho, wo) = (h + bottom, w + right);
        let mut out = vec![T::ZERO; n * c * ho * wo];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                let sy = reflect(y, h);
                for xx in 0..wo {
                    dst[y * wo + xx] = src[sy * w + reflect(xx, w)];
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out);
        self.graph.push_op(value, &[self], move |_| {
            Box::new(move |g| {
                let mut gx = vec![T::ZERO; n * c * h * w];
                for p in 0..n * c {
                    let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..ho {
                        let sy = reflect(y, h);
                        for xx in 0..wo {
                            dst[sy * w + reflect(xx, w)] += src[y * wo + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], gx))]
            })
        })
    }

    /// Keeps the top-left `h x w` window.
    pub fn crop(self, h: usize, w: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, hi, wi) = x.dims4();
        assert!(h <= hi && w <= wi, "crop larger than input");
        if h == hi && w == wi {
            return self;
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                let row = (p * hi + y) * wi;
                out.extend_from_slice(&x.data()[row..row + w]);
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out);
        self.graph.push_op(value, &[self], move |_| {
            Box::new(move |g| {
                let mut gx = vec![T::ZERO; n * c * hi * wi];
                for p in 0..n * c {
                    for y in 0..h {
                        let row = (p * hi + y) * wi;
                        let src = (p * h + y) * w;
                        gx[row..row + w].copy_from_slice(&g.data()[src..src + w]);
                    }
                }
                vec![Some(Tensor::new(vec![n, c, hi, wi], gx))]
            })
        })
    }
}
