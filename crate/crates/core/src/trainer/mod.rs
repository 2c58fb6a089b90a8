//! Joint loss with forward-real/backward-proxy substitution, proxy
//! preparation and the staged NPP training loops.

mod config;
mod loss;
mod proxy_train;
mod stages;

pub use config::{ForwardMode, TrainConfig, REFERENCE_LR_DROPS, REFERENCE_STAGE_STEPS};
pub use loss::{joint_loss, Frozen, LossComponents, LossOptions};
pub use proxy_train::{
    calibrate_lambda_p, finetune_proxy, pair_proxy, pretrain_candidates, pretrain_proxy, proxy_bpp, proxy_mimicry_mse, train_proxies, Candidate, ProxyReport,
};
pub use stages::{
    sample_rate_point, stage2_train, stage3_train, step_rng, train_multi, validation_loss, ProgressRecord, Stage, StageReport, StageRun,
    STATE_CHECKPOINT_KIND,
};
