use std::fmt;
use std::str::FromStr;

use crate::codec_bridge::{CodecKind, RateSchedule};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::npp::NppConfig;
use crate::proxy::ProxyConfig;
use crate::task_head::ClassifierTrainConfig;

/// Step counts of the three original training stages and where their
/// learning rate drops, kept for reference; the defaults below are these
/// divided by 20.
pub const REFERENCE_STAGE_STEPS: [usize; 3] = [400_000, 120_000, 100_000];
pub const REFERENCE_LR_DROPS: [usize; 3] = [320_000, 80_000, 60_000];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Real codec values forward, proxy gradients backward.
    Real,
    /// Proxy in both directions.
    Proxy,
}

impl fmt::Display for ForwardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForwardMode::Real => "real",
            ForwardMode::Proxy => "proxy",
        })
    }
}

impl FromStr for ForwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(ForwardMode::Real),
            "proxy" => Ok(ForwardMode::Proxy),
            other => Err(Error::Config(format!("unknown forward mode {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub codec: CodecKind,
    pub schedule: RateSchedule,
    pub beta: f64,
    pub lr: f64,
    pub lr_final: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
    pub forward_mode: ForwardMode,

    pub proxy: ProxyConfig,
    pub proxy_lr: f64,
    pub proxy_pretrain_steps: usize,
    pub proxy_chain_steps: usize,
    pub proxy_steps: usize,
    pub proxy_lr_drop: usize,
    pub calibration_images: usize,

    pub npp: NppConfig,
    pub stage2_steps: usize,
    pub stage2_lr_drop: usize,
    pub stage3_steps: usize,
    pub stage3_lr_drop: usize,
    pub eval_every: usize,
    pub validation_images: usize,
    pub log_every: usize,

    pub classifier: ClassifierTrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let schedule = RateSchedule::default_jpeg();
        let (lo, hi) = schedule.param_range();
        TrainConfig {
            codec: CodecKind::Jpeg,
            schedule,
            beta: 0.5,
            lr: 1e-4,
            lr_final: 1e-5,
            batch_size: 16,
            crop: 64,
            seed: 0,
            forward_mode: ForwardMode::Real,
            proxy: ProxyConfig::default(),
            proxy_lr: 1e-4,
            proxy_pretrain_steps: 5_000,
            proxy_chain_steps: 1_250,
            proxy_steps: 20_000,
            proxy_lr_drop: 16_000,
            calibration_images: 100,
            npp: NppConfig { rate_point_min: lo, rate_point_max: hi, ..NppConfig::default() },
            stage2_steps: 6_000,
            stage2_lr_drop: 4_000,
            stage3_steps: 5_000,
            stage3_lr_drop: 3_000,
            eval_every: 500,
            validation_images: 200,
            log_every: 50,
            classifier: ClassifierTrainConfig { crop: 64, ..ClassifierTrainConfig::default() },
        }
    }
}

const KEYS: &[&str] = &[
    "codec",
    "schedule",
    "beta",
    "lr",
    "lr_final",
    "batch_size",
    "crop",
    "seed",
    "forward_mode",
    "proxy_stages",
    "proxy_hidden",
    "proxy_latent",
    "proxy_floor",
    "proxy_lr",
    "proxy_pretrain_steps",
    "proxy_chain_steps",
    "proxy_steps",
    "proxy_lr_drop",
    "calibration_images",
    "npp_base_channels",
    "npp_unet_depth",
    "npp_pixel_layers",
    "npp_pixel_hidden",
    "npp_qa_hidden",
    "stage2_steps",
    "stage2_lr_drop",
    "stage3_steps",
    "stage3_lr_drop",
    "eval_every",
    "validation_images",
    "log_every",
    "classifier_width",
    "classifier_epochs",
    "classifier_batch_size",
    "classifier_lr",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0 && self.proxy_lr > 0.0 && self.classifier.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let steps = [self.stage2_steps, self.stage3_steps, self.proxy_steps, self.proxy_pretrain_steps, self.eval_every, self.log_every];
        if steps.contains(&0) {
            return Err(Error::Config("stage steps, eval_every and log_every must be at least 1".into()));
        }
        if self.batch_size == 0 || self.crop < 8 || self.classifier.batch_size == 0 || self.classifier.epochs == 0 {
            return Err(Error::Config("batch sizes and epochs must be positive and crop at least 8".into()));
        }
        if self.calibration_images == 0 || self.validation_images == 0 {
            return Err(Error::Config("calibration and validation sets must be non-empty".into()));
        }
        self.proxy.validate()?;
        self.npp.validate()
    }

    /// Switches codec; a different codec brings its default schedule.
    pub fn with_codec(mut self, codec: CodecKind) -> Self {
        if codec != self.codec {
            self.codec = codec;
            self.schedule = codec.default_schedule();
            (self.npp.rate_point_min, self.npp.rate_point_max) = self.schedule.param_range();
        }
        self
    }

    /// Parses a `key = value` file on top of the defaults; unknown keys
    /// are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(KEYS)?;
        let mut c = TrainConfig::default();
        kv.update("codec", &mut c.codec)?;
        if kv.get_str("codec").is_some() && kv.get_str("schedule").is_none() {
            c.schedule = c.codec.default_schedule();
        }
        kv.update("schedule", &mut c.schedule)?;
        let (lo, hi) = c.schedule.param_range();
        (c.npp.rate_point_min, c.npp.rate_point_max) = (lo, hi);
        kv.update("beta", &mut c.beta)?;
        kv.update("lr", &mut c.lr)?;
        kv.update("lr_final", &mut c.lr_final)?;
        kv.update("batch_size", &mut c.batch_size)?;
        kv.update("crop", &mut c.crop)?;
        c.classifier.crop = c.crop;
        kv.update("seed", &mut c.seed)?;
        c.classifier.seed = c.seed;
        kv.update("forward_mode", &mut c.forward_mode)?;
        kv.update("proxy_stages", &mut c.proxy.stages)?;
        kv.update("proxy_hidden", &mut c.proxy.hidden)?;
        kv.update("proxy_latent", &mut c.proxy.latent)?;
        kv.update("proxy_floor", &mut c.proxy.floor)?;
        kv.update("proxy_lr", &mut c.proxy_lr)?;
        kv.update("proxy_pretrain_steps", &mut c.proxy_pretrain_steps)?;
        kv.update("proxy_chain_steps", &mut c.proxy_chain_steps)?;
        kv.update("proxy_steps", &mut c.proxy_steps)?;
        kv.update("proxy_lr_drop", &mut c.proxy_lr_drop)?;
        kv.update("calibration_images", &mut c.calibration_images)?;
        kv.update("npp_base_channels", &mut c.npp.base_channels)?;
        kv.update("npp_unet_depth", &mut c.npp.unet_depth)?;
        kv.update("npp_pixel_layers", &mut c.npp.pixel_layers)?;
        kv.update("npp_pixel_hidden", &mut c.npp.pixel_hidden)?;
        kv.update("npp_qa_hidden", &mut c.npp.qa_hidden)?;
        kv.update("stage2_steps", &mut c.stage2_steps)?;
        kv.update("stage2_lr_drop", &mut c.stage2_lr_drop)?;
        kv.update("stage3_steps", &mut c.stage3_steps)?;
        kv.update("stage3_lr_drop", &mut c.stage3_lr_drop)?;
        kv.update("eval_every", &mut c.eval_every)?;
        kv.update("validation_images", &mut c.validation_images)?;
        kv.update("log_every", &mut c.log_every)?;
        kv.update("classifier_width", &mut c.classifier.width)?;
        kv.update("classifier_epochs", &mut c.classifier.epochs)?;
        kv.update("classifier_batch_size", &mut c.classifier.batch_size)?;
        kv.update("classifier_lr", &mut c.classifier.lr)?;
        c.validate()?;
        Ok(c)
    }

    /// Every field as `key = value` text accepted by [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        kv.set("codec", self.codec);
        kv.set("schedule", self.schedule.to_config_string());
        kv.set("beta", format!("{:?}", self.beta));
        kv.set("lr", format!("{:?}", self.lr));
        kv.set("lr_final", format!("{:?}", self.lr_final));
        kv.set("batch_size", self.batch_size);
        kv.set("crop", self.crop);
        kv.set("seed", self.seed);
        kv.set("forward_mode", self.forward_mode);
        kv.set("proxy_stages", self.proxy.stages);
        kv.set("proxy_hidden", self.proxy.hidden);
        kv.set("proxy_latent", self.proxy.latent);
        kv.set("proxy_floor", format!("{:?}", self.proxy.floor));
        kv.set("proxy_lr", format!("{:?}", self.proxy_lr));
        kv.set("proxy_pretrain_steps", self.proxy_pretrain_steps);
        kv.set("proxy_chain_steps", self.proxy_chain_steps);
        kv.set("proxy_steps", self.proxy_steps);
        kv.set("proxy_lr_drop", self.proxy_lr_drop);
        kv.set("calibration_images", self.calibration_images);
        kv.set("npp_base_channels", self.npp.base_channels);
        kv.set("npp_unet_depth", self.npp.unet_depth);
        kv.set("npp_pixel_layers", self.npp.pixel_layers);
        kv.set("npp_pixel_hidden", self.npp.pixel_hidden);
        kv.set("npp_qa_hidden", self.npp.qa_hidden);
        kv.set("stage2_steps", self.stage2_steps);
        kv.set("stage2_lr_drop", self.stage2_lr_drop);
        kv.set("stage3_steps", self.stage3_steps);
        kv.set("stage3_lr_drop", self.stage3_lr_drop);
        kv.set("eval_every", self.eval_every);
        kv.set("validation_images", self.validation_images);
        kv.set("log_every", self.log_every);
        kv.set("classifier_width", self.classifier.width);
        kv.set("classifier_epochs", self.classifier.epochs);
        kv.set("classifier_batch_size", self.classifier.batch_size);
        kv.set("classifier_lr", format!("{:?}", self.classifier.lr));
        kv.to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_reference_over_twenty() {
        let c = TrainConfig::default();
        assert_eq!(c.proxy_steps * 20, REFERENCE_STAGE_STEPS[0]);
        assert_eq!(c.stage2_steps * 20, REFERENCE_STAGE_STEPS[1]);
        assert_eq!(c.stage3_steps * 20, REFERENCE_STAGE_STEPS[2]);
        assert_eq!([c.proxy_lr_drop * 20, c.stage2_lr_drop * 20, c.stage3_lr_drop * 20], REFERENCE_LR_DROPS);
        assert_eq!(c.beta, 0.5);
        assert_eq!((c.lr, c.lr_final), (1e-4, 1e-5));
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.beta = 0.25;
        c.forward_mode = ForwardMode::Proxy;
        c.npp.base_channels = 8;
        c.seed = 42;
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(back.classifier.seed, 42);
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        assert!(TrainConfig::from_text("betta = 0.5").is_err());
        assert!(TrainConfig::from_text("beta = -1").is_err());
        assert!(TrainConfig::from_text("stage2_steps = 0").is_err());
        assert!(TrainConfig::from_text("schedule = 1:85:0").is_err());
    }

    #[test]
    fn codec_switch_brings_its_schedule() {
        let c = TrainConfig::from_text("codec = bpg").unwrap();
        assert_eq!(c.schedule, RateSchedule::default_bpg());
        assert_eq!((c.npp.rate_point_min, c.npp.rate_point_max), (28, 41));
    }
}
