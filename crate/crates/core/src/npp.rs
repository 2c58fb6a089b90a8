//! Neural preprocessing filter.
//!
//! Two branches are added to the input: a stack of 1x1 convolutions and a
//! U-Net whose encoder and decoder stages are each followed by a
//! quantization-adaptive channel scale `s = exp(fc2(relu(fc1(q))))`.
//! Every branch ends in a zero-initialized layer, so a fresh filter is the
//! identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::codec_bridge::RatePoint;
use crate::config::KeyValues;
use crate::data_io::{Checkpoint, ImageBatch, MIN_SIDE};
use crate::error::{Error, Result};
use crate::nn::{conv, init_conv, init_linear, linear, pad_to_multiple};
use crate::params::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "npp";

#[derive(Clone, Debug, PartialEq)]
pub struct NppConfig {
    pub base_channels: usize,
    pub unet_depth: usize,
    pub pixel_layers: usize,
    pub pixel_hidden: usize,
    pub qa_hidden: usize,
    pub qa_enabled: bool,
    pub rate_point_min: u32,
    pub rate_point_max: u32,
}

impl Default for NppConfig {
    fn default() -> Self {
        NppConfig {
            base_channels: 32,
            unet_depth: 3,
            pixel_layers: 3,
            pixel_hidden: 16,
            qa_hidden: 16,
            qa_enabled: true,
            rate_point_min: 20,
            rate_point_max: 85,
        }
    }
}

const KEYS: [&str; 8] =
    ["base_channels", "unet_depth", "pixel_layers", "pixel_hidden", "qa_hidden", "qa_enabled", "rate_point_min", "rate_point_max"];

impl NppConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unet_depth < 1 || self.base_channels < 1 || self.pixel_layers < 1 || self.pixel_hidden < 1 || self.qa_hidden < 1 {
            return Err(Error::Config("npp depth and widths must be at least 1".into()));
        }
        if self.rate_point_max <= self.rate_point_min {
            return Err(Error::Config("npp rate_point_max must exceed rate_point_min".into()));
        }
        Ok(())
    }

    /// Channels at U-Net level `d` (level 0 is full resolution).
    pub fn channels(&self, d: usize) -> usize {
        self.base_channels << d
    }

    /// Modulation site names: every encoder stage, then every decoder stage.
    pub fn sites(&self) -> Vec<String> {
        let enc = (0..self.unet_depth).map(|d| format!("enc{d}"));
        let dec = (0..self.unet_depth).map(|d| format!("dec{d}"));
        enc.chain(dec).collect()
    }

    fn site_channels(&self, site: &str) -> usize {
        let (kind, d) = site.split_at(3);
        let d: usize = d.parse().expect("site index");
        if kind == "enc" { self.channels(d + 1) } else { self.channels(d) }
    }

    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        kv.set("base_channels", self.base_channels);
        kv.set("unet_depth", self.unet_depth);
        kv.set("pixel_layers", self.pixel_layers);
        kv.set("pixel_hidden", self.pixel_hidden);
        kv.set("qa_hidden", self.qa_hidden);
        kv.set("qa_enabled", self.qa_enabled);
        kv.set("rate_point_min", self.rate_point_min);
        kv.set("rate_point_max", self.rate_point_max);
        kv.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(&KEYS)?;
        let mut c = NppConfig::default();
        kv.update("base_channels", &mut c.base_channels)?;
        kv.update("unet_depth", &mut c.unet_depth)?;
        kv.update("pixel_layers", &mut c.pixel_layers)?;
        kv.update("pixel_hidden", &mut c.pixel_hidden)?;
        kv.update("qa_hidden", &mut c.qa_hidden)?;
        kv.update("qa_enabled", &mut c.qa_enabled)?;
        kv.update("rate_point_min", &mut c.rate_point_min)?;
        kv.update("rate_point_max", &mut c.rate_point_max)?;
        c.validate()?;
        Ok(c)
    }
}

/// Whether a parameter belongs to a quantization-adaptive MLP.
pub fn is_qa_param(name: &str) -> bool {
    name.starts_with("qa.")
}

/// Filter weights together with the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Npp {
    pub config: NppConfig,
    pub params: ParamSet,
}

/// Filter output before and after the `[0, 1]` clamp.
pub struct NppOutput<'g, T> {
    pub pre_clamp: Var<'g, T>,
    pub filtered: Var<'g, T>,
}

impl Npp {
    pub fn init(config: NppConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut inp = 3;
        for i in 0..config.pixel_layers {
            let last = i + 1 == config.pixel_layers;
            let out = if last { 3 } else { config.pixel_hidden };
            init_conv(&mut ps, &mut rng, &format!("pixel.{i}"), out, inp, 1, last)?;
            inp = out;
        }
        init_conv(&mut ps, &mut rng, "unet.stem", config.channels(0), 3, 3, false)?;
        for d in 0..config.unet_depth {
            let (c0, c1) = (config.channels(d), config.channels(d + 1));
            init_conv(&mut ps, &mut rng, &format!("unet.enc{d}.down"), c1, c0, 3, false)?;
            init_conv(&mut ps, &mut rng, &format!("unet.enc{d}.conv"), c1, c1, 3, false)?;
        }
        for d in (0..config.unet_depth).rev() {
            let (c0, c1) = (config.channels(d), config.channels(d + 1));
            init_conv(&mut ps, &mut rng, &format!("unet.dec{d}.up"), c0, c1, 3, false)?;
            init_conv(&mut ps, &mut rng, &format!("unet.dec{d}.conv"), c0, 2 * c0, 3, false)?;
        }
        init_conv(&mut ps, &mut rng, "unet.out", 3, config.channels(0), 3, true)?;
        for site in config.sites() {
            let ch = config.site_channels(&site);
            init_linear(&mut ps, &mut rng, &format!("qa.{site}.fc1"), config.qa_hidden, 1, false)?;
            init_linear(&mut ps, &mut rng, &format!("qa.{site}.fc2"), ch, config.qa_hidden, true)?;
        }
        Ok(Npp { config, params: ps })
    }

    /// Quality parameter mapped to `[0, 1]`; out-of-range values are clamped.
    pub fn q_norm(&self, rate_point: RatePoint) -> f64 {
        let (lo, hi) = (self.config.rate_point_min as f64, self.config.rate_point_max as f64);
        let q = (rate_point.codec_param as f64 - lo) / (hi - lo);
        if !(0.0..=1.0).contains(&q) {
            log::warn!("codec parameter {} outside [{lo}, {hi}]; clamping", rate_point.codec_param);
        }
        q.clamp(0.0, 1.0)
    }

    fn scale_var<'g, T: Scalar>(&self, b: &Bound<'g, T>, q: Var<'g, T>, site: &str) -> Var<'g, T> {
        let h = linear(b, &format!("qa.{site}.fc1"), q).relu();
        let s = linear(b, &format!("qa.{site}.fc2"), h).exp();
        let n = s.shape()[1];
        s.reshape(&[n])
    }

    /// Scale vector of modulation site `site` (index into [`NppConfig::sites`]).
    pub fn qa_scale(&self, rate_point: RatePoint, site: usize) -> Result<Vec<f32>> {
        let sites = self.config.sites();
        let name = sites.get(site).ok_or_else(|| Error::InvalidInput(format!("no modulation site {site}")))?;
        let g = Graph::<f32>::new();
        let b = self.params.bind(&g, |_| false);
        let q = g.constant(Tensor::new(vec![1, 1], vec![self.q_norm(rate_point) as f32]));
        Ok(self.scale_var(&b, q, name).value().data().to_vec())
    }

    /// Differentiable forward pass on an `N x 3 x H x W` variable.
    pub fn forward<'g, T: Scalar>(&self, b: &Bound<'g, T>, x: Var<'g, T>, rate_point: RatePoint, qa_enabled: bool) -> Result<NppOutput<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] < MIN_SIDE || shape[3] < MIN_SIDE {
            return Err(Error::InvalidInput(format!("npp needs N x 3 x H x W with H, W >= {MIN_SIDE}, got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        let cfg = &self.config;

        let mut p = x;
        for i in 0..cfg.pixel_layers {
            p = conv(b, &format!("pixel.{i}"), p, Conv2dSpec::same(1));
            if i + 1 < cfg.pixel_layers {
                p = p.relu();
            }
        }

        let m = 1usize << cfg.unet_depth;
        let (ph, pw) = (pad_to_multiple(h, m), pad_to_multiple(w, m));
        if ph >= h || pw >= w {
            return Err(Error::InvalidInput(format!("{h}x{w} too small for unet depth {}", cfg.unet_depth)));
        }
        let g = x.graph();
        let q = g.constant(Tensor::new(vec![1, 1], vec![T::from_f64(self.q_norm(rate_point))]));
        let modulate = |f: Var<'g, T>, site: &str| if qa_enabled { f.channel_scale(self.scale_var(b, q, site)) } else { f };

        let same = Conv2dSpec::same(3);
        let mut f = conv(b, "unet.stem", x.reflect_pad(ph, pw), same).relu();
        let mut skips = Vec::with_capacity(cfg.unet_depth);
        for d in 0..cfg.unet_depth {
            skips.push(f);
            f = conv(b, &format!("unet.enc{d}.down"), f, Conv2dSpec::new(2, 1)).relu();
            f = conv(b, &format!("unet.enc{d}.conv"), f, same).relu();
            f = modulate(f, &format!("enc{d}"));
        }
        for d in (0..cfg.unet_depth).rev() {
            f = conv(b, &format!("unet.dec{d}.up"), f.upsample2(), same).relu();
            f = f.concat_channels(skips[d]);
            f = conv(b, &format!("unet.dec{d}.conv"), f, same).relu();
            f = modulate(f, &format!("dec{d}"));
        }
        let u = conv(b, "unet.out", f, same).crop(h, w);

        let pre_clamp = x.add(p).add(u);
        Ok(NppOutput { pre_clamp, filtered: pre_clamp.clamp01() })
    }

    /// Filters a batch without recording gradients.
    pub fn apply(&self, x: &ImageBatch, rate_point: RatePoint, qa_enabled: bool) -> Result<ImageBatch> {
        let g = Graph::<f32>::new();
        let b = self.params.bind(&g, |_| false);
        let out = self.forward(&b, g.constant(x.tensor().clone()), rate_point, qa_enabled)?;
        ImageBatch::new((*out.filtered.value()).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, self.config.to_text(), self.params.clone())
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let ck = ck.expect_kind(CHECKPOINT_KIND)?;
        let config = NppConfig::from_text(&ck.config)?;
        let reference = Npp::init(config.clone(), 0)?;
        check_layout(&reference.params, &ck.params)?;
        Ok(Npp { config, params: ck.params })
    }
}

/// Checks that `actual` has exactly the names and shapes of `expected`.
pub(crate) fn check_layout(expected: &ParamSet, actual: &ParamSet) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(Error::IncompatibleCheckpoint(format!("expected {} parameters, found {}", expected.len(), actual.len())));
    }
    for (name, t) in expected.iter() {
        match actual.get(name) {
            Some(a) if a.shape() == t.shape() => {}
            Some(a) => return Err(Error::IncompatibleCheckpoint(format!("{name}: shape {:?}, expected {:?}", a.shape(), t.shape()))),
            None => return Err(Error::IncompatibleCheckpoint(format!("missing parameter {name}"))),
        }
    }
    Ok(())
}
