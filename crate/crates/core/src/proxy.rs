//! Differentiable stand-in for the real codec: a strided convolutional
//! autoencoder with a per-channel logistic entropy model.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{logistic_bin_mass, Conv2dSpec, Graph, Var};
use crate::config::KeyValues;
use crate::data_io::{Checkpoint, ImageBatch};
use crate::error::{Error, Result};
use crate::nn::{conv, init_conv, pad_to_multiple};
use crate::npp::check_layout;
use crate::params::{Adam, Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "proxy";

/// Candidate rate-distortion weights tried during calibration.
pub const LAMBDA_P_CANDIDATES: [f64; 5] = [10.0, 50.0, 100.0, 400.0, 1000.0];

pub fn checkpoint_name(rate_point_id: u32) -> String {
    format!("proxy_rp{rate_point_id}.nppc")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyConfig {
    pub stages: usize,
    pub hidden: usize,
    pub latent: usize,
    pub floor: f64,
    pub lambda_p: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig { stages: 3, hidden: 64, latent: 96, floor: 1e-9, lambda_p: 100.0 }
    }
}

const KEYS: [&str; 5] = ["stages", "hidden", "latent", "floor", "lambda_p"];

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::Config("proxy needs at least 2 stages".into()));
        }
        if self.latent < 8 || self.hidden < 1 {
            return Err(Error::Config("proxy latent channels must be at least 8".into()));
        }
        if !(self.floor > 0.0 && self.floor <= 1e-3) {
            return Err(Error::Config(format!("likelihood floor {} outside (0, 1e-3]", self.floor)));
        }
        if !(self.lambda_p > 0.0) {
            return Err(Error::Config("lambda_p must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        kv.set("stages", self.stages);
        kv.set("hidden", self.hidden);
        kv.set("latent", self.latent);
        kv.set("floor", format!("{:?}", self.floor));
        kv.set("lambda_p", format!("{:?}", self.lambda_p));
        kv.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(&KEYS)?;
        let mut c = ProxyConfig::default();
        kv.update("stages", &mut c.stages)?;
        kv.update("hidden", &mut c.hidden)?;
        kv.update("latent", &mut c.latent)?;
        kv.update("floor", &mut c.floor)?;
        kv.update("lambda_p", &mut c.lambda_p)?;
        c.validate()?;
        Ok(c)
    }
}

/// Latent quantization: additive uniform noise for training, rounding
/// (ties to even, straight-through gradient) otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    Noise { seed: u64 },
    Round,
}

/// Value-level latent quantization.
pub fn quantize_latent<T: Scalar>(y: &Tensor<T>, mode: QuantMode) -> Tensor<T> {
    match mode {
        QuantMode::Round => y.map(Scalar::round_ties_even),
        QuantMode::Noise { seed } => y.zip_map(&noise(y.shape(), seed), |a, b| a + b),
    }
}

fn noise<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(rng.random::<f64>() - 0.5)).collect())
}

/// Total code length in bits of an `N x C x H x W` latent under per-channel
/// logistic bins with location `loc[c]` and scale `exp(log_scale[c])`.
pub fn rate_estimate<T: Scalar>(y_q: &Tensor<T>, loc: &[f64], log_scale: &[f64], floor: f64) -> f64 {
    let (n, c, h, w) = y_q.dims4();
    let mut bits = 0.0;
    for img in 0..n {
        for ch in 0..c {
            let sigma = log_scale[ch].exp();
            let off = (img * c + ch) * h * w;
            for &v in &y_q.data()[off..off + h * w] {
                bits += -logistic_bin_mass(v.to_f64(), loc[ch], sigma).max(floor).log2();
            }
        }
    }
    bits
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proxy {
    pub config: ProxyConfig,
    pub params: ParamSet,
}

/// Differentiable proxy outputs.
pub struct ProxyVars<'g, T> {
    pub recon: Var<'g, T>,
    pub bits: Var<'g, T>,
    pub bpp: Var<'g, T>,
}

/// Evaluated proxy outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyOutput {
    pub recon: ImageBatch,
    pub rate_bits: f64,
    pub bpp: f64,
}

impl Proxy {
    pub fn init(config: ProxyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let s = config.stages;
        for i in 0..s {
            let inp = if i == 0 { 3 } else { config.hidden };
            let out = if i + 1 == s { config.latent } else { config.hidden };
            init_conv(&mut ps, &mut rng, &format!("analysis.{i}"), out, inp, 3, false)?;
        }
        for i in 0..s {
            let inp = if i == 0 { config.latent } else { config.hidden };
            let out = if i + 1 == s { 3 } else { config.hidden };
            init_conv(&mut ps, &mut rng, &format!("synthesis.{i}"), out, inp, 3, false)?;
        }
        ps.insert("entropy.loc", Tensor::zeros(&[config.latent]))?;
        ps.insert("entropy.log_scale", Tensor::zeros(&[config.latent]))?;
        Ok(Proxy { config, params: ps })
    }

    /// `Y_hat = synthesis(quantize(analysis(x)))` and its estimated rate.
    pub fn forward<'g, T: Scalar>(&self, b: &Bound<'g, T>, x: Var<'g, T>, mode: QuantMode) -> Result<ProxyVars<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::InvalidInput(format!("proxy needs N x 3 x H x W input, got {shape:?}")));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let s = self.config.stages;
        let m = 1usize << s;
        let (ph, pw) = (pad_to_multiple(h, m), pad_to_multiple(w, m));
        if ph >= h || pw >= w {
            return Err(Error::InvalidInput(format!("{h}x{w} too small for {s} proxy stages")));
        }
        let mut y = x.reflect_pad(ph, pw);
        for i in 0..s {
            y = conv(b, &format!("analysis.{i}"), y, Conv2dSpec::new(2, 1));
            if i + 1 < s {
                y = y.silu();
            }
        }
        let y_q = match mode {
            QuantMode::Round => y.round_ste(),
            QuantMode::Noise { seed } => y.add_const(Rc::new(noise(&y.shape(), seed))),
        };
        let bits = y_q.logistic_bits(b.get("entropy.loc"), b.get("entropy.log_scale"), self.config.floor).sum();
        let mut r = y_q;
        for i in 0..s {
            r = conv(b, &format!("synthesis.{i}"), r.upsample2(), Conv2dSpec::same(3));
            if i + 1 < s {
                r = r.silu();
            }
        }
        let bpp = bits.scale(T::from_f64(1.0 / (n * h * w) as f64));
        Ok(ProxyVars { recon: r.crop(h, w), bits, bpp })
    }

    /// Evaluates the proxy without recording gradients.
    pub fn apply(&self, x: &ImageBatch, mode: QuantMode) -> Result<ProxyOutput> {
        let g = Graph::<f32>::new();
        let b = self.params.bind(&g, |_| false);
        let out = self.forward(&b, g.constant(x.tensor().clone()), mode)?;
        let recon = ImageBatch::new((*out.recon.value()).clone())?;
        Ok(ProxyOutput { recon, rate_bits: out.bits.item().to_f64(), bpp: out.bpp.item().to_f64() })
    }

    /// One optimizer step on `bpp + lambda_p * MSE(target, Y_hat)` with
    /// noise-mode quantization. Pretraining uses `target = x`; finetuning
    /// uses the real codec's reconstruction of `x`.
    pub fn train_step(&mut self, adam: &mut Adam, x: &ImageBatch, target: &ImageBatch, lr: f64, noise_seed: u64) -> Result<StepLoss> {
        let (loss, grads) = {
            let g = Graph::<f32>::new();
            let b = self.params.bind(&g, |_| true);
            let out = self.forward(&b, g.constant(x.tensor().clone()), QuantMode::Noise { seed: noise_seed })?;
            let mse = out.recon.mse(g.constant(target.tensor().clone()));
            let total = out.bpp.add(mse.scale(self.config.lambda_p as f32));
            let loss = StepLoss {
                loss: total.item() as f64,
                bpp: out.bpp.item() as f64,
                mse: mse.item() as f64,
            };
            if !loss.loss.is_finite() {
                return Err(Error::NonFinite(format!("proxy loss {loss:?}")));
            }
            (loss, b.gradients(&g.backward(total)))
        };
        adam.update(&mut self.params, &grads, lr);
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, self.config.to_text(), self.params.clone())
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let ck = ck.expect_kind(CHECKPOINT_KIND)?;
        let config = ProxyConfig::from_text(&ck.config)?;
        check_layout(&Proxy::init(config.clone(), 0)?.params, &ck.params)?;
        Ok(Proxy { config, params: ck.params })
    }
}

/// Components of one proxy training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
}

/// `bpp + lambda_p * distortion`.
pub fn rd_loss(bpp: f64, distortion: f64, lambda_p: f64) -> f64 {
    bpp + lambda_p * distortion
}

/// Index of the candidate whose measured bpp is closest to `target_bpp`
/// (first one on ties).
pub fn closest_rate(candidate_bpp: &[f64], target_bpp: f64) -> Option<usize> {
    (0..candidate_bpp.len()).min_by(|&a, &b| (candidate_bpp[a] - target_bpp).abs().total_cmp(&(candidate_bpp[b] - target_bpp).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Adam;
    use proptest::{prop_assert, proptest};

    fn small() -> ProxyConfig {
        ProxyConfig { stages: 2, hidden: 6, latent: 8, ..ProxyConfig::default() }
    }

    fn random_batch(seed: u64, n: usize, h: usize, w: usize) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::new(Tensor::new(vec![n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.random::<f32>()).collect())).unwrap()
    }

    #[test]
    fn round_mode_examples() {
        let y = Tensor::new(vec![3], vec![2.4f32, -1.5, 0.5]);
        assert_eq!(quantize_latent(&y, QuantMode::Round).data(), &[2.0, -2.0, 0.0]);
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let y = Tensor::new(vec![1000], (0..1000).map(|i| i as f64 * 0.01).collect());
        let a = quantize_latent(&y, QuantMode::Noise { seed: 3 });
        assert!(a.data().iter().zip(y.data()).all(|(q, v)| (q - v).abs() < 0.5));
        assert_eq!(a, quantize_latent(&y, QuantMode::Noise { seed: 3 }));
        assert_ne!(a, quantize_latent(&y, QuantMode::Noise { seed: 4 }));
    }

    #[test]
    fn all_zero_latents_at_unit_scale() {
        // 96 x 4 x 4 zeros, mu = 0, sigma = 1.
        let y = Tensor::<f64>::zeros(&[1, 96, 4, 4]);
        let bits = rate_estimate(&y, &[0.0; 96], &[0.0; 96], 1e-9);
        let f = |t: f64| 1.0 / (1.0 + (-t).exp());
        let oracle = 96.0 * 16.0 * -(f(0.5) - f(-0.5)).log2();
        assert!((bits - oracle).abs() < 1e-6);
    }

    #[test]
    fn half_mass_costs_one_bit() {
        let sigma = 0.5 / 3f64.ln();
        let y = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        assert!((rate_estimate(&y, &[0.0], &[sigma.ln()], 1e-9) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mode_is_cheapest() {
        let cost = |v: f64| rate_estimate(&Tensor::new(vec![1, 1, 1, 1], vec![v]), &[2.0], &[0.3], 1e-9);
        assert!((-5..=9).filter(|&v| v != 2).all(|v| cost(v as f64) > cost(2.0)));
    }

    #[test]
    fn graph_rate_matches_scalar_recomputation() {
        let mut proxy = Proxy::init(small(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in proxy.params.get_mut("entropy.loc").unwrap().data_mut() {
            *v = rng.random::<f32>() - 0.5;
        }
        for v in proxy.params.get_mut("entropy.log_scale").unwrap().data_mut() {
            *v = rng.random::<f32>() - 0.5;
        }
        let x = random_batch(3, 2, 16, 16);
        let g = Graph::<f64>::new();
        let b = proxy.params.bind(&g, |_| false);
        let out = proxy.forward(&b, g.constant(x.tensor().cast()), QuantMode::Round).unwrap();
        // Rebuild the latent independently and count bits per element.
        let xv = g.constant(x.tensor().cast()).reflect_pad(0, 0);
        let mut y = xv;
        for i in 0..2 {
            y = conv(&b, &format!("analysis.{i}"), y, Conv2dSpec::new(2, 1));
            if i == 0 {
                y = y.silu();
            }
        }
        let yq = quantize_latent(&y.value(), QuantMode::Round);
        let loc: Vec<f64> = proxy.params.get("entropy.loc").unwrap().data().iter().map(|&v| v as f64).collect();
        let ls: Vec<f64> = proxy.params.get("entropy.log_scale").unwrap().data().iter().map(|&v| v as f64).collect();
        let oracle = rate_estimate(&yq, &loc, &ls, 1e-9);
        assert!((out.bits.item() - oracle).abs() <= 1e-6 * oracle.max(1.0));
        assert!((out.bpp.item() - oracle / (2.0 * 256.0)).abs() < 1e-9);
    }

    #[test]
    fn forward_shape_and_determinism() {
        let proxy = Proxy::init(small(), 1).unwrap();
        let x = random_batch(4, 2, 13, 19);
        let a = proxy.apply(&x, QuantMode::Round).unwrap();
        assert_eq!(a.recon.dims(), x.dims());
        assert!(a.rate_bits >= 0.0 && a.bpp.is_finite());
        assert_eq!(a, proxy.apply(&x, QuantMode::Round).unwrap());
    }

    #[test]
    fn loss_assembly() {
        assert!((rd_loss(0.8, 0.002, 100.0) - 1.0).abs() < 1e-12);
        assert!((rd_loss(0.6, 0.004, 100.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closest_candidate() {
        assert_eq!(closest_rate(&[0.2, 0.5, 0.9, 1.5], 0.8), Some(2));
        assert_eq!(closest_rate(&[], 0.8), None);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut proxy = Proxy::init(small(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for v in proxy.params.get_mut("entropy.log_scale").unwrap().data_mut() {
            *v = 0.5 + rng.random::<f32>();
        }
        let x = random_batch(7, 1, 8, 8).into_tensor().cast::<f64>();
        let lambda = 100.0;
        let target = x.clone();
        let loss = |params: &ParamSet, x: &Tensor<f64>, want: Option<&str>| {
            let g = Graph::<f64>::new();
            let b = params.bind(&g, |n| Some(n) == want);
            let xv = g.param(x.clone());
            let out = proxy.forward(&b, xv, QuantMode::Noise { seed: 9 }).unwrap();
            let l = out.bpp.add(out.recon.mse(g.constant(target.clone())).scale(lambda));
            let grads = g.backward(l);
            let pg = want.map(|n| grads.get_or_zeros(b.get(n)));
            (l.item(), grads.get_or_zeros(xv), pg)
        };
        let h = 1e-6;
        let (_, gx, gw) = loss(&proxy.params, &x, Some("analysis.0.w"));
        for i in [0, 17, 100, 150] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&proxy.params, &xp, None).0 - loss(&proxy.params, &xm, None).0) / (2.0 * h);
            let an = gx.data()[i];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6), "x[{i}] fd={fd} an={an}");
        }
        let gw = gw.unwrap();
        for i in [0, 5, 40] {
            // Parameters are stored in f32; step by an f32-representable amount.
            let mut pp = proxy.params.clone();
            let base = pp.get("analysis.0.w").unwrap().data()[i];
            let step = 1e-3f32;
            pp.get_mut("analysis.0.w").unwrap().data_mut()[i] = base + step;
            let up = loss(&pp, &x, None).0;
            pp.get_mut("analysis.0.w").unwrap().data_mut()[i] = base - step;
            let down = loss(&pp, &x, None).0;
            let hp = ((base + step) as f64 - (base - step) as f64) / 2.0;
            let fd = (up - down) / (2.0 * hp);
            let an = gw.data()[i];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-4), "w[{i}] fd={fd} an={an}");
        }
    }

    #[test]
    fn pretraining_reduces_loss() {
        let mut proxy = Proxy::init(small(), 1).unwrap();
        let mut adam = Adam::new();
        let x = random_batch(8, 4, 16, 16);
        let first = proxy.train_step(&mut adam, &x, &x, 1e-2, 0).unwrap().loss;
        let mut last = first;
        for step in 1..60 {
            last = proxy.train_step(&mut adam, &x, &x, 1e-2, step).unwrap().loss;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_and_name() {
        let proxy = Proxy::init(small(), 2).unwrap();
        let back = Proxy::from_checkpoint(Checkpoint::from_bytes(&proxy.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, proxy);
        assert_eq!(checkpoint_name(3), "proxy_rp3.nppc");
        assert!(ProxyConfig::from_text("floor = 0.5").is_err());
    }

    proptest! {
        #[test]
        fn integer_mass_is_normalized(mu in -5.0f64..5.0, log_sigma in -3.0f64..2.5) {
            let sigma = log_sigma.exp();
            let total: f64 = (-30..=30).map(|v| logistic_bin_mass(v as f64, mu, sigma)).sum();
            prop_assert!(total > 0.0 && total <= 1.0 + 1e-6);
        }

        #[test]
        fn rate_is_non_negative(vals in proptest::collection::vec(-50.0f64..50.0, 8), mu in -3.0f64..3.0, ls in -2.0f64..2.0) {
            let y = Tensor::new(vec![1, 2, 2, 2], vals);
            prop_assert!(rate_estimate(&y, &[mu, -mu], &[ls, ls * 0.5], 1e-9) >= 0.0);
        }
    }
}
