use std::collections::BTreeMap;

use rand::Rng;

use crate::codec_bridge::{encode_decode, quantize8, FailureBudget, RatePoint, TraditionalCodec};
use crate::data_io::{CropMode, ImageBatch, ImageStore};
use crate::error::{Error, Result};
use crate::params::Adam;
use crate::proxy::{closest_rate, Proxy, ProxyConfig, QuantMode, LAMBDA_P_CANDIDATES};

use super::stages::step_rng;
use super::TrainConfig;

const CODEC_FAILURE_LIMIT: usize = 3;
const EVAL_CHUNK: usize = 50;
const PRETRAIN_TAG: u8 = 10;
const FINETUNE_TAG: u8 = 11;

/// Round-mode proxy bpp over a batch, evaluated in chunks.
pub fn proxy_bpp(proxy: &Proxy, x: &ImageBatch) -> Result<f64> {
    let mut bits = 0.0;
    for start in (0..x.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.len());
        bits += proxy.apply(&ImageBatch::new(x.tensor().slice_batch(start, end))?, QuantMode::Round)?.rate_bits;
    }
    let (n, _, h, w) = x.dims();
    Ok(bits / (n * h * w) as f64)
}

/// `MSE(Y_hat, X_hat)`: how far the round-mode proxy reconstruction is
/// from the real codec's reconstruction `x_hat` of `x`.
pub fn proxy_mimicry_mse(proxy: &Proxy, x: &ImageBatch, x_hat: &ImageBatch) -> Result<f64> {
    if x.dims() != x_hat.dims() {
        return Err(Error::ShapeMismatch { op: "proxy_mimicry_mse", left: x.tensor().shape().to_vec(), right: x_hat.tensor().shape().to_vec() });
    }
    let mut sq = 0.0;
    for start in (0..x.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.len());
        let y = proxy.apply(&ImageBatch::new(x.tensor().slice_batch(start, end))?, QuantMode::Round)?.recon;
        let target = x_hat.tensor().slice_batch(start, end);
        sq += y.tensor().data().iter().zip(target.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>();
    }
    Ok(sq / x.tensor().numel() as f64)
}

fn random_batch(cfg: &TrainConfig, train: &ImageStore, rng: &mut impl Rng) -> Result<ImageBatch> {
    let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train.len())).collect();
    Ok(train.batch(&idx, cfg.crop, CropMode::Random, rng)?.0)
}

/// Rate-distortion pretraining with `target = x`.
pub fn pretrain_proxy(cfg: &TrainConfig, train: &ImageStore, lambda_p: f64) -> Result<Proxy> {
    let mut proxy = Proxy::init(ProxyConfig { lambda_p, ..cfg.proxy.clone() }, cfg.seed)?;
    rd_train(cfg, &mut proxy, train, cfg.proxy_pretrain_steps, cfg.seed)?;
    Ok(proxy)
}

fn rd_train(cfg: &TrainConfig, proxy: &mut Proxy, train: &ImageStore, steps: usize, stream: u64) -> Result<()> {
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let lambda_p = proxy.config.lambda_p;
    let mut adam = Adam::new();
    for step in 0..steps {
        let mut rng = step_rng(stream, PRETRAIN_TAG, step);
        let x = random_batch(cfg, train, &mut rng)?;
        let loss = proxy.train_step(&mut adam, &x, &x, cfg.proxy_lr, rng.random())?;
        if (step + 1) % cfg.log_every == 0 {
            log::info!("proxy pretrain lambda_p={lambda_p} step={} loss={:.5} bpp={:.4} mse={:.6}", step + 1, loss.loss, loss.bpp, loss.mse);
        }
    }
    Ok(())
}

/// Pretrained proxy for one candidate weight and its bpp on the
/// calibration images.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub lambda_p: f64,
    pub proxy: Proxy,
    pub bpp: f64,
}

/// Pretrains one proxy per candidate `lambda_p`, in ascending order of
/// `lambda_p`. The highest weight is trained from scratch; each lower one
/// starts from the previous result and trains `proxy_chain_steps` more.
/// With `proxy_chain_steps = 0` every candidate starts from scratch.
pub fn pretrain_candidates(cfg: &TrainConfig, train: &ImageStore, calibration: &ImageBatch) -> Result<Vec<Candidate>> {
    let calibration = &quantize8(calibration);
    let mut out: Vec<Candidate> = Vec::with_capacity(LAMBDA_P_CANDIDATES.len());
    for (k, &lambda_p) in LAMBDA_P_CANDIDATES.iter().rev().enumerate() {
        let proxy = match out.last() {
            Some(prev) if cfg.proxy_chain_steps > 0 => {
                let mut proxy = prev.proxy.clone();
                proxy.config.lambda_p = lambda_p;
                rd_train(cfg, &mut proxy, train, cfg.proxy_chain_steps, cfg.seed ^ ((k as u64) << 32))?;
                proxy
            }
            _ => pretrain_proxy(cfg, train, lambda_p)?,
        };
        let bpp = proxy_bpp(&proxy, calibration)?;
        log::info!("proxy candidate lambda_p={lambda_p} calibration bpp={bpp:.4}");
        out.push(Candidate { lambda_p, proxy, bpp });
    }
    out.reverse();
    Ok(out)
}

/// Index of the candidate whose bpp is closest to `real_bpp`.
pub fn calibrate_lambda_p(candidates: &[Candidate], real_bpp: f64) -> Result<usize> {
    let bpp: Vec<f64> = candidates.iter().map(|c| c.bpp).collect();
    closest_rate(&bpp, real_bpp).ok_or_else(|| Error::InvalidInput("no proxy candidates".into()))
}

/// Trains the proxy to reproduce the real codec's reconstructions at
/// `rate_point`. Codec failures skip the batch; three in a row abort.
pub fn finetune_proxy(cfg: &TrainConfig, proxy: &mut Proxy, train: &ImageStore, codec: &dyn TraditionalCodec, rate_point: RatePoint) -> Result<usize> {
    let mut adam = Adam::new();
    let mut budget = FailureBudget::new(CODEC_FAILURE_LIMIT);
    let mut skipped = 0;
    for step in 0..cfg.proxy_steps {
        let mut rng = step_rng(cfg.seed ^ rate_point.id as u64, FINETUNE_TAG, step);
        let x = quantize8(&random_batch(cfg, train, &mut rng)?);
        let x_hat = match encode_decode(codec, &x, rate_point) {
            Ok(r) => {
                budget.success();
                r.recon
            }
            Err(e) => {
                skipped += 1;
                budget.failure(e)?;
                continue;
            }
        };
        let lr = if step < cfg.proxy_lr_drop { cfg.proxy_lr } else { cfg.proxy_lr * 0.1 };
        let loss = proxy.train_step(&mut adam, &x, &x_hat, lr, rng.random())?;
        if (step + 1) % cfg.log_every == 0 {
            log::info!("proxy finetune rate_point={} step={} loss={:.5} bpp={:.4} mse={:.6}", rate_point.id, step + 1, loss.loss, loss.bpp, loss.mse);
        }
    }
    Ok(skipped)
}

/// Summary of one paired proxy.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyReport {
    pub rate_point: RatePoint,
    pub lambda_p: f64,
    pub real_bpp: f64,
    pub proxy_bpp: f64,
    pub mimicry_before: f64,
    pub mimicry_after: f64,
    pub skipped_batches: usize,
}

/// Picks the candidate matching the real codec's bpp at `rate_point` on
/// the calibration images and finetunes a copy of it.
pub fn pair_proxy(
    cfg: &TrainConfig,
    candidates: &[Candidate],
    train: &ImageStore,
    calibration: &ImageBatch,
    codec: &dyn TraditionalCodec,
    rate_point: RatePoint,
) -> Result<(Proxy, ProxyReport)> {
    let calibration = quantize8(calibration);
    let coded = encode_decode(codec, &calibration, rate_point)?;
    let pick = &candidates[calibrate_lambda_p(candidates, coded.bpp)?];
    log::info!("rate point {}: real bpp {:.4}, picked lambda_p={} (proxy bpp {:.4})", rate_point.id, coded.bpp, pick.lambda_p, pick.bpp);
    let mut proxy = pick.proxy.clone();
    let mimicry_before = proxy_mimicry_mse(&proxy, &calibration, &coded.recon)?;
    let skipped_batches = finetune_proxy(cfg, &mut proxy, train, codec, rate_point)?;
    let report = ProxyReport {
        rate_point,
        lambda_p: pick.lambda_p,
        real_bpp: coded.bpp,
        proxy_bpp: proxy_bpp(&proxy, &calibration)?,
        mimicry_before,
        mimicry_after: proxy_mimicry_mse(&proxy, &calibration, &coded.recon)?,
        skipped_batches,
    };
    log::info!("rate point {}: mimicry MSE {:.6} -> {:.6}", rate_point.id, report.mimicry_before, report.mimicry_after);
    Ok((proxy, report))
}

/// Calibrates, pretrains and finetunes one proxy per rate point of the
/// schedule. Mimicry is measured on the calibration images, which should
/// not be part of `train`.
pub fn train_proxies(cfg: &TrainConfig, train: &ImageStore, calibration: &ImageBatch, codec: &dyn TraditionalCodec) -> Result<BTreeMap<u32, (Proxy, ProxyReport)>> {
    let candidates = pretrain_candidates(cfg, train, calibration)?;
    cfg.schedule.points().iter().map(|&rp| Ok((rp.id, pair_proxy(cfg, &candidates, train, calibration, codec, rp)?))).collect()
}
