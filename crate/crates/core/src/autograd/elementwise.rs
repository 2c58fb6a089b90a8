use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    fn unary(self, value: Tensor<T>, local_grad: impl Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static) -> Var<'g, T> {
        let input = self.value();
        self.graph.push_op(value, &[self], move |_| {
            Box::new(move |g| vec![Some(local_grad(&input, g))])
        })
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let value = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.push_op(value, &[self, other], |flags| {
            let flags = flags.to_vec();
            Box::new(move |g| flags.iter().map(|&f| f.then(|| g.clone())).collect())
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let value = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.push_op(value, &[self, other], |flags| {
            let (fa, fb) = (flags[0], flags[1]);
            Box::new(move |g| vec![fa.then(|| g.clone()), fb.then(|| g.map(|v| -v))])
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let value = a.zip_map(&b, |x, y| x * y);
        self.graph.push_op(value, &[self, other], move |flags| {
            let (fa, fb) = (flags[0], flags[1]);
            Box::new(move |g| {
                vec![fa.then(|| g.zip_map(&b, |gv, y| gv * y)), fb.then(|| g.zip_map(&a, |gv, x| gv * x))]
            })
        })
    }

    pub fn scale(self, factor: T) -> Var<'g, T> {
        let value = self.value().map(|v| v * factor);
        self.unary(value, move |_, g| g.map(|v| v * factor))
    }

    pub fn add_scalar(self, offset: T) -> Var<'g, T> {
        let value = self.value().map(|v| v + offset);
        self.unary(value, |_, g| g.clone())
    }

    pub fn square(self) -> Var<'g, T> {
        let value = self.value().map(|v| v * v);
        let two = T::from_f64(2.0);
        self.unary(value, move |x, g| g.zip_map(x, |gv, xv| two * xv * gv))
    }

    pub fn relu(self) -> Var<'g, T> {
        let value = self.value().map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.unary(value, |x, g| g.zip_map(x, |gv, xv| if xv > T::ZERO { gv } else { T::ZERO }))
    }

    pub fn exp(self) -> Var<'g, T> {
        let value = self.value().map(|v| v.exp());
        let out = value.clone();
        self.graph.push_op(value, &[self], move |_| {
            Box::new(move |g| vec![Some(g.zip_map(&out, |gv, ov| gv * ov))])
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'g, T> {
        let value = self.value().map(|v| v * sigmoid(v));
        self.unary(value, |x, g| {
            g.zip_map(x, |gv, xv| {
                let s = sigmoid(xv);
                gv * (s + xv * s * (T::ONE - s))
            })
        })
    }

    pub fn sum(self) -> Var<'g, T> {
        let input = self.value();
        let value = Tensor::scalar(T::from_f64(input.sum_f64()));
        let shape = input.shape().to_vec();
        self.graph.push_op(value, &[self], move |_| {
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.item()))])
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel();
        self.sum().scale(T::from_f64(1.0 / n as f64))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(self, other: Var<'g, T>) -> Var<'g, T> {
        self.sub(other).square().mean()
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let input_shape = self.shape();
        let value = (*self.value()).clone().reshape(shape);
        self.unary(value, move |_, g| g.clone().reshape(&input_shape))
    }

    /// Multiplies every channel `c` of an `N x C x H x W` tensor by `scale[c]`.
    pub fn channel_scale(self, scale: Var<'g, T>) -> Var<'g, T> {
        let (x, s) = (self.value(), scale.value());
        let (n, c, h, w) = x.dims4();
        assert_eq!(s.numel(), c, "channel scale length {} != channels {c}", s.numel());
        let hw = h * w;
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let sv = s.data()[i % c];
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        let s_shape = s.shape().to_vec();
        self.graph.push_op(out, &[self, scale], move |flags| {
            let (fx, fs) = (flags[0], flags[1]);
            Box::new(move |g| {
                let gx = fx.then(|| {
                    let mut gx = g.clone();
                    for (i, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                        let sv = s.data()[i % c];
                        chunk.iter_mut().for_each(|v| *v *= sv);
                    }
                    gx
                });
                let gs = fs.then(|| {
                    let mut acc = vec![0.0f64; c];
                    for img in 0..n {
                        for ch in 0..c {
                            let off = (img * c + ch) * hw;
                            acc[ch] += g.data()[off..off + hw]
                                .iter()
                                .zip(&x.data()[off..off + hw])
                                .map(|(a, b)| (*a * *b).to_f64())
                                .sum::<f64>();
                        }
                    }
                    Tensor::new(s_shape.clone(), acc.into_iter().map(T::from_f64).collect())
                });
                vec![gx, gs]
            })
        })
    }

    /// Clamp to `[0, 1]`. Gradients pass on the closed interval and are
    /// zeroed outside it.
    pub fn clamp01(self) -> Var<'g, T> {
        let value = self.value().map(|v| v.max(T::ZERO).min(T::ONE));
        self.unary(value, |x, g| {
            g.zip_map(x, |gv, xv| if xv >= T::ZERO && xv <= T::ONE { gv } else { T::ZERO })
        })
    }

    /// Rounds to the nearest integer (ties to even); the gradient passes
    /// straight through.
    pub fn round_ste(self) -> Var<'g, T> {
        let value = self.value().map(|v| v.round_ties_even());
        self.unary(value, |_, g| g.clone())
    }

    /// Snaps unit-range values to the 8-bit grid, `round(255 x) / 255`,
    /// with a pass-through gradient.
    pub fn quantize8_ste(self) -> Var<'g, T> {
        let value = self.value().map(quantize8);
        self.unary(value, |_, g| g.clone())
    }

    /// Forward value taken from `real`; gradient taken from `proxy`.
    ///
    /// This realizes `proxy + stop_gradient(real - proxy)` but copies
    /// `real` directly so the forward value matches it bit for bit.
    pub fn value_substitute(real: Var<'g, T>, proxy: Var<'g, T>) -> Result<Var<'g, T>> {
        let r = real.value();
        let p_shape = proxy.shape();
        if r.shape() != p_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "value_substitute",
                left: r.shape().to_vec(),
                right: p_shape,
            });
        }
        let value = (*r).clone();
        let graph = proxy.graph;
        Ok(graph.push_op(value, &[real, proxy], |_| Box::new(|g| vec![None, Some(g.clone())])))
    }

    /// Adds a fixed tensor, e.g. a noise draw.
    pub fn add_const(self, offset: Rc<Tensor<T>>) -> Var<'g, T> {
        let value = self.value().zip_map(&offset, |a, b| a + b);
        self.unary(value, |_, g| g.clone())
    }
}

/// `round(255 v) / 255` with ties to even.
pub fn quantize8<T: Scalar>(v: T) -> T {
    let s = T::from_f64(255.0);
    (v * s).round_ties_even() / s
}

#[cfg(test)]
mod tests {
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut p = x.to_vec();
        let mut m = x.to_vec();
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    }

    #[test]
    fn silu_and_exp_gradients_match_finite_differences() {
        let x0 = vec![-1.3, -0.2, 0.4, 2.1];
        let eval = |x: &[f64]| {
            let g = Graph::<f64>::new();
            let v = g.param(Tensor::new(vec![4], x.to_vec()));
            v.silu().add(v.scale(0.3).exp()).sum().item()
        };
        let g = Graph::<f64>::new();
        let v = g.param(Tensor::new(vec![4], x0.clone()));
        let out = v.silu().add(v.scale(0.3).exp()).sum();
        let grads = g.backward(out);
        let analytic = grads.get(v).unwrap();
        for i in 0..4 {
            let fd = finite_diff(eval, &x0, i);
            assert!((analytic.data()[i] - fd).abs() < 1e-6, "{i}: {} vs {fd}", analytic.data()[i]);
        }
    }

    #[test]
    fn channel_scale_gradients() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let s = g.param(Tensor::new(vec![2], vec![0.5, 2.0]));
        let y = x.channel_scale(s);
        assert_eq!(y.value().data(), &[0.5, 1.0, 6.0, 8.0]);
        let grads = g.backward(y.sum());
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, 0.5, 2.0, 2.0]);
        assert_eq!(grads.get(s).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn clamp_passes_gradient_on_closed_interval() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![4], vec![-0.1, 0.0, 1.0, 1.2]));
        let y = x.clamp01();
        assert_eq!(y.value().data(), &[0.0, 0.0, 1.0, 1.0]);
        let grads = g.backward(y.sum());
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn quantize8_examples() {
        assert_eq!(super::quantize8(0.5f64), 128.0 / 255.0);
        let on_grid = 77.0f32 / 255.0;
        assert_eq!(super::quantize8(on_grid), on_grid);
    }

    #[test]
    fn substitute_forward_and_gradient() {
        let g = Graph::<f64>::new();
        let p_in = g.param(Tensor::scalar(1.5));
        let proxy = p_in.scale(2.0); // 3.0
        let real = g.constant(Tensor::scalar(5.0));
        let out = super::Var::value_substitute(real, proxy).unwrap();
        assert_eq!(out.item(), 5.0);
        let loss = out.square().sum();
        let grads = g.backward(loss);
        // d(out^2)/d(p_in) = 2 * 5 * 2
        assert_eq!(grads.get(p_in).unwrap().item(), 20.0);
    }

    #[test]
    fn substitute_rejects_shape_mismatch() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.param(Tensor::zeros(&[3]));
        assert!(super::Var::value_substitute(a, b).is_err());
    }
}
