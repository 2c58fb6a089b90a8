//! Rate-accuracy curves, BD-rate, PSNR and residual maps.

mod bdrate;
mod metrics;
mod plot;

pub use bdrate::bd_rate;
pub use metrics::{psnr, psnr_from_mse, residual_map, PSNR_CAP_DB};
pub use plot::curves_svg;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub rate_point: u32,
    pub codec_param: u32,
    /// Mean over the test set.
    pub bpp: f64,
    /// Top-1 accuracy in [0, 1].
    pub accuracy: f64,
    /// Mean dB against the original images.
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateAccuracyCurve {
    pub pipeline: String,
    pub points: Vec<CurvePoint>,
}

use crate::codec_bridge::{encode_decode, quantize8, RatePoint, RateSchedule, TraditionalCodec};
use crate::data_io::ImageBatch;
use crate::error::{Error, Result};
use crate::npp::Npp;
use crate::task_head::Classifier;

const CHUNK: usize = 100;

/// What sits in front of the real codec.
#[derive(Clone, Copy, Debug)]
pub enum Pipeline<'a> {
    Baseline,
    Npp(&'a Npp),
}

/// Filters `x` in chunks (identity for the baseline) and snaps to 8 bits.
pub fn preprocess(pipeline: Pipeline<'_>, x: &ImageBatch, rate_point: RatePoint) -> Result<ImageBatch> {
    match pipeline {
        Pipeline::Baseline => Ok(quantize8(x)),
        Pipeline::Npp(npp) => {
            let mut parts = Vec::new();
            for start in (0..x.len()).step_by(CHUNK) {
                let end = (start + CHUNK).min(x.len());
                let chunk = ImageBatch::new(x.tensor().slice_batch(start, end))?;
                parts.push(npp.apply(&chunk, rate_point, npp.config.qa_enabled)?);
            }
            Ok(quantize8(&ImageBatch::stack(&parts)?))
        }
    }
}

/// One curve point: preprocess, code with the real codec, classify.
pub fn eval_point(
    pipeline: Pipeline<'_>,
    codec: &dyn TraditionalCodec,
    rate_point: RatePoint,
    x: &ImageBatch,
    labels: &[usize],
    classifier: &Classifier,
) -> Result<CurvePoint> {
    if x.is_empty() || labels.len() != x.len() {
        return Err(Error::InvalidInput(format!("evaluation needs a non-empty test set with one label per image ({} images, {} labels)", x.len(), labels.len())));
    }
    let coded = encode_decode(codec, &preprocess(pipeline, x, rate_point)?, rate_point)?;
    Ok(CurvePoint {
        rate_point: rate_point.id,
        codec_param: rate_point.codec_param,
        bpp: coded.bpp,
        accuracy: classifier.accuracy(&coded.recon, labels),
        psnr: psnr(x, &coded.recon)?,
    })
}

/// Rate-accuracy curve over every point of `schedule`.
pub fn eval_curve(
    pipeline: Pipeline<'_>,
    tag: &str,
    codec: &dyn TraditionalCodec,
    schedule: &RateSchedule,
    x: &ImageBatch,
    labels: &[usize],
    classifier: &Classifier,
) -> Result<RateAccuracyCurve> {
    let points = schedule.points().iter().map(|&rp| eval_point(pipeline, codec, rp, x, labels, classifier)).collect::<Result<_>>()?;
    Ok(RateAccuracyCurve { pipeline: tag.to_string(), points })
}

/// Curve from one dedicated model per rate point.
pub fn eval_curve_per_point(
    models: &[(RatePoint, &Npp)],
    tag: &str,
    codec: &dyn TraditionalCodec,
    x: &ImageBatch,
    labels: &[usize],
    classifier: &Classifier,
) -> Result<RateAccuracyCurve> {
    let points = models.iter().map(|&(rp, npp)| eval_point(Pipeline::Npp(npp), codec, rp, x, labels, classifier)).collect::<Result<_>>()?;
    Ok(RateAccuracyCurve { pipeline: tag.to_string(), points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec_bridge::JpegCodec;
    use crate::npp::NppConfig;
    use crate::task_head::ClassifierConfig;
    use crate::tensor::Tensor;

    #[test]
    fn fresh_npp_matches_baseline() {
        let data: Vec<f32> = (0..4 * 3 * 16 * 16).map(|i| ((i * 37 % 251) as f32 / 255.0 * 255.0).round() / 255.0).collect();
        let x = ImageBatch::new(Tensor::new(vec![4, 3, 16, 16], data)).unwrap();
        let labels = [0, 1, 2, 0];
        let clf = Classifier::init(ClassifierConfig { width: 2, class_count: 3 }, 1).unwrap();
        let npp = Npp::init(NppConfig { base_channels: 2, unet_depth: 2, ..NppConfig::default() }, 1).unwrap();
        let schedule = RateSchedule::default_jpeg();
        let a = eval_curve(Pipeline::Baseline, "base", &JpegCodec, &schedule, &x, &labels, &clf).unwrap();
        let b = eval_curve(Pipeline::Npp(&npp), "base", &JpegCodec, &schedule, &x, &labels, &clf).unwrap();
        assert_eq!(a, b);
        assert!(a.points.windows(2).all(|w| w[0].bpp > w[1].bpp));
        assert!(eval_point(Pipeline::Baseline, &JpegCodec, schedule.middle(), &x, &[0], &clf).is_err());
    }
}
