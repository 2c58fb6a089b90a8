use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Logistic density `F'(t) = F(t) F(-t)`.
fn density(t: f64) -> f64 {
    sigmoid(t) * sigmoid(-t)
}

/// Probability mass of the unit-width bin centred on `v` under a logistic
/// distribution with location `mu` and scale `sigma`.
///
/// The difference of CDFs is taken on whichever side of the mode keeps
/// both terms away from 1, which preserves precision in the tails.
pub fn logistic_bin_mass(v: f64, mu: f64, sigma: f64) -> f64 {
    let upper = (v + 0.5 - mu) / sigma;
    let lower = (v - 0.5 - mu) / sigma;
    if v > mu {
        sigmoid(-lower) - sigmoid(-upper)
    } else {
        sigmoid(upper) - sigmoid(lower)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Per-element code length in bits, `-log2(max(P_c(v), floor))`, of an
    /// `N x C x H x W` latent under per-channel logistic bins.
    ///
    /// `loc` and `log_scale` hold one entry per channel; the scale is
    /// `exp(log_scale)`. Elements whose mass falls below `floor` get a
    /// constant cost and no gradient.
    pub fn logistic_bits(self, loc: Var<'g, T>, log_scale: Var<'g, T>, floor: f64) -> Var<'g, T> {
        let (y, mu, ls) = (self.value(), loc.value(), log_scale.value());
        let (n, c, h, w) = y.dims4();
        assert_eq!(mu.numel(), c, "entropy model location length mismatch");
        assert_eq!(ls.numel(), c, "entropy model scale length mismatch");
        let hw = h * w;
        let ln2 = std::f64::consts::LN_2;
        let floor_bits = -floor.log2();

        let mut bits = vec![T::ZERO; y.numel()];
        // dbits/dv per element; zero where the floor is active.
        let mut dv = vec![0.0f64; y.numel()];
        // dbits/dlog_scale per element.
        let mut ds = vec![0.0f64; y.numel()];
        for img in 0..n {
            for ch in 0..c {
                let m = mu.data()[ch].to_f64();
                let sigma = ls.data()[ch].to_f64().exp();
                let off = (img * c + ch) * hw;
                for i in off..off + hw {
                    let v = y.data()[i].to_f64();
                    let p = logistic_bin_mass(v, m, sigma);
                    if p < floor {
                        bits[i] = T::from_f64(floor_bits);
                        continue;
                    }
                    bits[i] = T::from_f64(-p.ln() / ln2);
                    let upper = (v + 0.5 - m) / sigma;
                    let lower = (v - 0.5 - m) / sigma;
                    let (fu, fl) = (density(upper), density(lower));
                    let dbits_dp = -1.0 / (p * ln2);
                    dv[i] = dbits_dp * (fu - fl) / sigma;
                    ds[i] = dbits_dp * -(fu * upper - fl * lower);
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], bits);
        self.graph.push_op(value, &[self, loc, log_scale], move |flags| {
            let (fy, fm, fs) = (flags[0], flags[1], flags[2]);
            Box::new(move |g| {
                let gd = g.data();
                let gy = fy.then(|| {
                    Tensor::new(
                        vec![n, c, h, w],
                        gd.iter().zip(&dv).map(|(gv, d)| T::from_f64(gv.to_f64() * d)).collect(),
                    )
                });
                let per_channel = |local: &[f64], sign: f64| {
                    let mut acc = vec![0.0f64; c];
                    for img in 0..n {
                        for (ch, a) in acc.iter_mut().enumerate() {
                            let off = (img * c + ch) * hw;
                            *a += (off..off + hw).map(|i| gd[i].to_f64() * local[i]).sum::<f64>() * sign;
                        }
                    }
                    Tensor::new(vec![c], acc.into_iter().map(T::from_f64).collect())
                };
                // dP/dmu = -dP/dv
                let gm = fm.then(|| per_channel(&dv, -1.0));
                let gs = fs.then(|| per_channel(&ds, 1.0));
                vec![gy, gm, gs]
            })
        })
    }
}
