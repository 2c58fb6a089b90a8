use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::codec_bridge::{FailureBudget, RatePoint, RateSchedule};
use crate::config::KeyValues;
use crate::data_io::{Checkpoint, CropMode, ImageBatch, ImageStore};
use crate::error::{Error, Result};
use crate::npp::{check_layout, is_qa_param, Npp, NppConfig};
use crate::params::{Adam, ParamSet};

use super::{joint_loss, Frozen, LossComponents, LossOptions, TrainConfig};

pub const STATE_CHECKPOINT_KIND: &str = "npp_state";
const CODEC_FAILURE_LIMIT: usize = 3;
const VALIDATION_CHUNK: usize = 50;

/// Which rate points a stage trains on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stage {
    /// One rate point, adaptive layers off and frozen.
    Fixed(RatePoint),
    /// A uniformly sampled rate point per step, everything trainable.
    Adaptive,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Fixed(_) => 2,
            Stage::Adaptive => 3,
        }
    }

    fn qa_enabled(self) -> bool {
        matches!(self, Stage::Adaptive)
    }

    fn trainable(self, name: &str) -> bool {
        self.qa_enabled() || !is_qa_param(name)
    }

    fn steps(self, cfg: &TrainConfig) -> (usize, usize) {
        match self {
            Stage::Fixed(_) => (cfg.stage2_steps, cfg.stage2_lr_drop),
            Stage::Adaptive => (cfg.stage3_steps, cfg.stage3_lr_drop),
        }
    }

    fn validation_points(self, schedule: &RateSchedule) -> Vec<RatePoint> {
        match self {
            Stage::Fixed(rp) => vec![rp],
            Stage::Adaptive => schedule.points().to_vec(),
        }
    }
}

/// Draws one rate point uniformly from the schedule.
pub fn sample_rate_point(schedule: &RateSchedule, rng: &mut impl Rng) -> RatePoint {
    schedule.points()[rng.random_range(0..schedule.len())]
}

/// Independent generator for one training step, so that a resumed run
/// sees the same batches as an uninterrupted one.
pub fn step_rng(seed: u64, stage: u8, step: usize) -> ChaCha8Rng {
    let mut z = seed ^ ((stage as u64) << 56) ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// One line of the progress log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProgressRecord {
    pub step: usize,
    pub stage: u8,
    pub rate_point: u32,
    pub loss: LossComponents,
    pub lambda: f64,
    pub lr: f64,
}

impl ProgressRecord {
    pub fn to_line(&self) -> String {
        format!(
            "step={} stage={} rate_point={} L={:.6} R={:.6} D_m={:.6} D_pre={:.6} lr={:e}",
            self.step, self.stage, self.rate_point, self.loss.total, self.loss.rate, self.loss.task, self.loss.pre, self.lr
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub records: Vec<ProgressRecord>,
    /// `(step, mean validation loss)` at every evaluation.
    pub validation: Vec<(usize, f64)>,
    pub skipped_batches: usize,
}

impl StageReport {
    /// Mean training loss over the first and last `window` steps.
    pub fn loss_trend(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.records.len();
        if window == 0 || n < 2 * window {
            return None;
        }
        let mean = |r: &[ProgressRecord]| r.iter().map(|p| p.loss.total).sum::<f64>() / r.len() as f64;
        Some((mean(&self.records[..window]), mean(&self.records[n - window..])))
    }
}

/// Everything needed to continue a stage exactly where it stopped.
#[derive(Clone, Debug)]
pub struct StageRun {
    pub stage: Stage,
    pub npp: Npp,
    pub adam: Adam,
    pub step: usize,
    pub best: Npp,
    pub best_score: f64,
    pub best_step: usize,
}

impl StageRun {
    /// Starts a stage from `npp` with a fresh optimizer.
    pub fn new(stage: Stage, mut npp: Npp) -> Self {
        npp.config.qa_enabled = stage.qa_enabled();
        StageRun { stage, best: npp.clone(), npp, adam: Adam::new(), step: 0, best_score: f64::INFINITY, best_step: 0 }
    }

    pub fn is_finished(&self, cfg: &TrainConfig) -> bool {
        self.step >= self.stage.steps(cfg).0
    }

    /// Trains until `until` steps are done (capped at the stage length).
    pub fn run(&mut self, cfg: &TrainConfig, frozen: &Frozen, train: &ImageStore, val: (&ImageBatch, &[usize]), until: usize) -> Result<StageReport> {
        if train.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        for rp in self.stage.validation_points(&cfg.schedule) {
            frozen.proxy(rp)?;
        }
        let (steps, lr_drop) = self.stage.steps(cfg);
        let until = until.min(steps);
        let stage_no = self.stage.number();
        let mut report = StageReport::default();
        let mut budget = FailureBudget::new(CODEC_FAILURE_LIMIT);
        let opts = LossOptions::new(cfg.forward_mode, cfg.beta, self.stage.qa_enabled());

        if self.step == 0 && self.best_score.is_infinite() {
            self.validate(cfg, frozen, val, &mut report)?;
        }
        while self.step < until {
            let mut rng = step_rng(cfg.seed, stage_no, self.step);
            let rate_point = match self.stage {
                Stage::Fixed(rp) => rp,
                Stage::Adaptive => sample_rate_point(&cfg.schedule, &mut rng),
            };
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train.len())).collect();
            let (x, labels) = train.batch(&idx, cfg.crop, CropMode::Random, &mut rng)?;
            let lr = if self.step < lr_drop { cfg.lr } else { cfg.lr_final };

            let stage = self.stage;
            let result = {
                let g = Graph::<f32>::new();
                let b = self.npp.params.bind(&g, |n| stage.trainable(n));
                joint_loss(&self.npp, &g, &b, frozen, &x, &labels, rate_point, opts).map(|(loss, comp)| (comp, b.gradients(&g.backward(loss))))
            };
            match result {
                Ok((comp, grads)) => {
                    budget.success();
                    self.adam.update(&mut self.npp.params, &grads, lr);
                    let rec = ProgressRecord { step: self.step + 1, stage: stage_no, rate_point: rate_point.id, loss: comp, lambda: rate_point.lambda, lr };
                    if (self.step + 1) % cfg.log_every == 0 {
                        log::info!("{}", rec.to_line());
                    }
                    report.records.push(rec);
                }
                Err(e @ Error::Codec(_)) => {
                    report.skipped_batches += 1;
                    budget.failure(e)?;
                }
                Err(e) => return Err(e),
            }
            self.step += 1;
            if self.step % cfg.eval_every == 0 || self.step == steps {
                self.validate(cfg, frozen, val, &mut report)?;
            }
        }
        Ok(report)
    }

    fn validate(&mut self, cfg: &TrainConfig, frozen: &Frozen, val: (&ImageBatch, &[usize]), report: &mut StageReport) -> Result<()> {
        let score = validation_loss(&self.npp, cfg, frozen, self.stage.validation_points(&cfg.schedule), val)?;
        log::info!("stage={} step={} validation L={score:.6}", self.stage.number(), self.step);
        report.validation.push((self.step, score));
        if score < self.best_score {
            self.best_score = score;
            self.best_step = self.step;
            self.best = self.npp.clone();
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = ParamSet::new();
        let (moments, adam_step) = self.adam.state();
        for (prefix, set) in [("npp/", &self.npp.params), ("best/", &self.best.params), ("adam/", &moments)] {
            for (name, t) in set.iter() {
                params.insert(format!("{prefix}{name}"), t.clone()).expect("prefixed names are unique");
            }
        }
        let mut kv = KeyValues::default();
        kv.set("state.stage", self.stage.number());
        kv.set("state.rate_point", match self.stage {
            Stage::Fixed(rp) => format!("{}:{}:{:?}", rp.id, rp.codec_param, rp.lambda),
            Stage::Adaptive => "none".into(),
        });
        kv.set("state.step", self.step);
        kv.set("state.adam_step", adam_step);
        kv.set("state.best_score", format!("{:?}", self.best_score));
        kv.set("state.best_step", self.best_step);
        Checkpoint::new(STATE_CHECKPOINT_KIND, format!("{}{}", self.npp.config.to_text(), kv.to_text()), params)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let ck = ck.expect_kind(STATE_CHECKPOINT_KIND)?;
        let kv = KeyValues::parse(&ck.config)?;
        let mut model_kv = KeyValues::default();
        for key in kv.keys().filter(|k| !k.starts_with("state.")) {
            model_kv.set(key, kv.get_str(key).unwrap_or_default());
        }
        let config = NppConfig::from_text(&model_kv.to_text())?;
        let need = |key: &str| kv.get_str(key).ok_or_else(|| Error::CorruptCheckpoint(format!("missing {key}")));
        let bad = |key: &str| Error::CorruptCheckpoint(format!("bad {key}"));
        let stage = match need("state.stage")? {
            "2" => {
                let parts: Vec<&str> = need("state.rate_point")?.split(':').collect();
                let [id, param, lambda] = parts[..] else { return Err(bad("state.rate_point")) };
                let (id, param, lambda) = (
                    id.parse().map_err(|_| bad("state.rate_point"))?,
                    param.parse().map_err(|_| bad("state.rate_point"))?,
                    lambda.parse().map_err(|_| bad("state.rate_point"))?,
                );
                Stage::Fixed(RatePoint::new(id, param, lambda))
            }
            "3" => Stage::Adaptive,
            _ => return Err(bad("state.stage")),
        };
        let parse = |key: &str| need(key)?.parse::<f64>().map_err(|_| bad(key));
        let split = |prefix: &str| ck.params.filter(|n| n.starts_with(prefix)).iter().map(|(n, t)| (n[prefix.len()..].to_string(), t.clone())).collect::<Vec<_>>();
        let rebuild = |prefix: &str| -> Result<ParamSet> {
            let mut set = ParamSet::new();
            for (n, t) in split(prefix) {
                set.insert(n, t)?;
            }
            Ok(set)
        };
        let reference = Npp::init(config.clone(), 0)?;
        let npp_params = rebuild("npp/")?;
        let best_params = rebuild("best/")?;
        check_layout(&reference.params, &npp_params)?;
        check_layout(&reference.params, &best_params)?;
        Ok(StageRun {
            stage,
            npp: Npp { config: config.clone(), params: npp_params },
            best: Npp { config, params: best_params },
            adam: Adam::from_state(&rebuild("adam/")?, parse("state.adam_step")? as u64),
            step: parse("state.step")? as usize,
            best_score: parse("state.best_score")?,
            best_step: parse("state.best_step")? as usize,
        })
    }
}

/// Mean real-codec joint loss of `npp` over the validation images and the
/// given rate points.
pub fn validation_loss(npp: &Npp, cfg: &TrainConfig, frozen: &Frozen, points: Vec<RatePoint>, val: (&ImageBatch, &[usize])) -> Result<f64> {
    let (x, labels) = val;
    if x.is_empty() {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    let opts = LossOptions::new(super::ForwardMode::Real, cfg.beta, npp.config.qa_enabled);
    let mut sum = 0.0;
    let mut weight = 0.0;
    for &rp in &points {
        for start in (0..x.len()).step_by(VALIDATION_CHUNK) {
            let end = (start + VALIDATION_CHUNK).min(x.len());
            let chunk = ImageBatch::new(x.tensor().slice_batch(start, end))?;
            let g = Graph::<f32>::new();
            let b = npp.params.bind(&g, |_| false);
            let (_, comp) = joint_loss(npp, &g, &b, frozen, &chunk, &labels[start..end], rp, opts)?;
            sum += comp.total * (end - start) as f64;
            weight += (end - start) as f64;
        }
    }
    Ok(sum / weight)
}

/// Stage 2: filter without adaptive layers at the middle rate point.
/// Returns the best-by-validation model.
pub fn stage2_train(cfg: &TrainConfig, frozen: &Frozen, train: &ImageStore, val: (&ImageBatch, &[usize])) -> Result<(Npp, StageReport)> {
    let npp = Npp::init(cfg.npp.clone(), cfg.seed)?;
    let mut run = StageRun::new(Stage::Fixed(cfg.schedule.middle()), npp);
    let report = run.run(cfg, frozen, train, val, usize::MAX)?;
    Ok((run.best, report))
}

/// Stage 3: continues from a stage-2 model with the adaptive layers on
/// and a rate point sampled per step.
pub fn stage3_train(cfg: &TrainConfig, frozen: &Frozen, train: &ImageStore, val: (&ImageBatch, &[usize]), stage2: &Npp) -> Result<(Npp, StageReport)> {
    let mut run = StageRun::new(Stage::Adaptive, stage2.clone());
    let report = run.run(cfg, frozen, train, val, usize::MAX)?;
    Ok((run.best, report))
}

/// One independently trained fixed-point model per rate point.
pub fn train_multi(cfg: &TrainConfig, frozen: &Frozen, train: &ImageStore, val: (&ImageBatch, &[usize])) -> Result<Vec<(RatePoint, Npp, StageReport)>> {
    let mut out = Vec::with_capacity(cfg.schedule.len());
    for &rp in cfg.schedule.points() {
        log::info!("training dedicated model for rate point {}", rp.id);
        let npp = Npp::init(cfg.npp.clone(), cfg.seed)?;
        let mut run = StageRun::new(Stage::Fixed(rp), npp);
        let report = run.run(cfg, frozen, train, val, usize::MAX)?;
        out.push((rp, run.best, report));
    }
    Ok(out)
}
