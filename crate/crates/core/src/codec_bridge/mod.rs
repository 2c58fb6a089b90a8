//! Real (non-differentiable) codecs and the operators that connect them to
//! the differentiable pipeline.

mod bpg;
mod jpeg;

use std::fmt;
use std::str::FromStr;

pub use bpg::BpgCodec;
pub use jpeg::{jpeg_scan_payload_len, JpegCodec};

use crate::autograd::{quantize8_value, Var};
use crate::data_io::ImageBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One operating point: codec quality setting and the task-loss weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatePoint {
    pub id: u32,
    pub codec_param: u32,
    pub lambda: f64,
}

impl RatePoint {
    pub const fn new(id: u32, codec_param: u32, lambda: f64) -> Self {
        RatePoint { id, codec_param, lambda }
    }
}

/// Ordered list of rate points with unique ids and positive weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RateSchedule(Vec<RatePoint>);

impl RateSchedule {
    pub fn new(points: Vec<RatePoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("rate schedule is empty".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.lambda > 0.0) {
                return Err(Error::Config(format!("rate point {} has non-positive lambda {}", p.id, p.lambda)));
            }
            if points[..i].iter().any(|q| q.id == p.id) {
                return Err(Error::Config(format!("duplicate rate point id {}", p.id)));
            }
        }
        Ok(RateSchedule(points))
    }

    /// JPEG schedule: quality 85/70/50/35/20 paired with lambda 0.5/1/2/4/8.
    pub fn default_jpeg() -> Self {
        RateSchedule(vec![
            RatePoint::new(1, 85, 0.5),
            RatePoint::new(2, 70, 1.0),
            RatePoint::new(3, 50, 2.0),
            RatePoint::new(4, 35, 4.0),
            RatePoint::new(5, 20, 8.0),
        ])
    }

    /// BPG schedule: QP 28/31/34/37/41 paired with lambda 0.5/1/2/4/8.
    pub fn default_bpg() -> Self {
        RateSchedule(vec![
            RatePoint::new(1, 28, 0.5),
            RatePoint::new(2, 31, 1.0),
            RatePoint::new(3, 34, 2.0),
            RatePoint::new(4, 37, 4.0),
            RatePoint::new(5, 41, 8.0),
        ])
    }

    pub fn points(&self) -> &[RatePoint] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: u32) -> Result<RatePoint> {
        self.0.iter().copied().find(|p| p.id == id).ok_or_else(|| Error::Config(format!("no rate point with id {id}")))
    }

    /// The point in the middle of the list (id 3 for the default schedules).
    pub fn middle(&self) -> RatePoint {
        self.0[self.0.len() / 2]
    }

    /// Smallest and largest codec parameter.
    pub fn param_range(&self) -> (u32, u32) {
        let min = self.0.iter().map(|p| p.codec_param).min().expect("non-empty");
        let max = self.0.iter().map(|p| p.codec_param).max().expect("non-empty");
        (min, max)
    }

    /// `id:param:lambda` triples separated by commas.
    pub fn to_config_string(&self) -> String {
        self.0.iter().map(|p| format!("{}:{}:{}", p.id, p.codec_param, p.lambda)).collect::<Vec<_>>().join(",")
    }
}

impl FromStr for RateSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut points = Vec::new();
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let parts: Vec<&str> = item.split(':').collect();
            let bad = || Error::Config(format!("rate point `{item}` is not id:param:lambda"));
            if parts.len() != 3 {
                return Err(bad());
            }
            points.push(RatePoint::new(
                parts[0].parse().map_err(|_| bad())?,
                parts[1].parse().map_err(|_| bad())?,
                parts[2].parse().map_err(|_| bad())?,
            ));
        }
        RateSchedule::new(points)
    }
}

/// Interleaved 8-bit image handed to a real codec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

/// A standard image codec driven through encode/decode calls.
pub trait TraditionalCodec: Send + Sync {
    fn name(&self) -> &str;

    fn encode(&self, image: &Image8, codec_param: u32) -> Result<Vec<u8>>;

    fn decode(&self, bytes: &[u8]) -> Result<Image8>;

    /// Number of bytes charged to the rate for an encoded stream.
    fn payload_len(&self, bytes: &[u8]) -> usize {
        bytes.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecKind {
    Jpeg,
    Bpg,
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodecKind::Jpeg => "jpeg",
            CodecKind::Bpg => "bpg",
        })
    }
}

impl FromStr for CodecKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jpeg" => Ok(CodecKind::Jpeg),
            "bpg" => Ok(CodecKind::Bpg),
            other => Err(Error::Config(format!("unknown codec {other}"))),
        }
    }
}

impl CodecKind {
    /// Instantiates the codec, failing early if an external binary is missing.
    pub fn open(self) -> Result<Box<dyn TraditionalCodec>> {
        match self {
            CodecKind::Jpeg => Ok(Box::new(JpegCodec)),
            CodecKind::Bpg => Ok(Box::new(BpgCodec::locate()?)),
        }
    }

    pub fn default_schedule(self) -> RateSchedule {
        match self {
            CodecKind::Jpeg => RateSchedule::default_jpeg(),
            CodecKind::Bpg => RateSchedule::default_bpg(),
        }
    }
}

/// Reconstruction and measured rate from a real codec.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecResult {
    pub recon: ImageBatch,
    /// Mean bits per pixel over the batch.
    pub bpp: f64,
    pub per_image_bpp: Vec<f64>,
    pub byte_sizes: Vec<usize>,
}

/// Encodes and decodes every image of `x` at the rate point's quality.
/// No gradient flows through this call.
pub fn encode_decode(codec: &dyn TraditionalCodec, x: &ImageBatch, rate_point: RatePoint) -> Result<CodecResult> {
    if !x.is_on_8bit_grid() {
        return Err(Error::InvalidInput("codec input must lie on the 8-bit grid".into()));
    }
    let (n, c, h, w) = x.dims();
    let mut recon = Vec::with_capacity(n);
    let mut per_image_bpp = Vec::with_capacity(n);
    let mut byte_sizes = Vec::with_capacity(n);
    for i in 0..n {
        let img = Image8 { width: w, height: h, channels: c, samples: x.to_interleaved_u8(i) };
        let bytes = codec
            .encode(&img, rate_point.codec_param)
            .map_err(|e| Error::Codec(format!("{} encode of image {i}: {e}", codec.name())))?;
        let decoded = codec.decode(&bytes).map_err(|e| Error::Codec(format!("{} decode of image {i}: {e}", codec.name())))?;
        if (decoded.width, decoded.height, decoded.channels) != (w, h, c) {
            return Err(Error::Codec(format!("{} returned a {}x{}x{} image for {w}x{h}x{c}", codec.name(), decoded.width, decoded.height, decoded.channels)));
        }
        let payload = codec.payload_len(&bytes);
        byte_sizes.push(payload);
        per_image_bpp.push(8.0 * payload as f64 / (h * w) as f64);
        recon.push(ImageBatch::from_interleaved_u8(w, h, c, &decoded.samples)?);
    }
    let bpp = per_image_bpp.iter().sum::<f64>() / n as f64;
    Ok(CodecResult { recon: ImageBatch::stack(&recon)?, bpp, per_image_bpp, byte_sizes })
}

/// Snaps a batch to the 8-bit grid, `round(255 x) / 255` with ties to even.
pub fn quantize8(x: &ImageBatch) -> ImageBatch {
    ImageBatch::new(x.tensor().map(quantize8_value)).expect("quantization keeps a valid batch")
}

/// Graph form of [`quantize8`] with a pass-through gradient.
pub fn quantize8_ste<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    x.quantize8_ste()
}

/// Forward value of `real`, gradient of `proxy`.
pub fn value_substitute<'g, T: Scalar>(real: Var<'g, T>, proxy: Var<'g, T>) -> Result<Var<'g, T>> {
    Var::value_substitute(real, proxy)
}

/// Scalar convenience: substitutes a measured value for a one-element
/// proxy variable.
pub fn substitute_scalar<'g, T: Scalar>(real: f64, proxy: Var<'g, T>) -> Result<Var<'g, T>> {
    let graph = proxy.graph();
    let real = graph.constant(Tensor::new(proxy.shape(), vec![T::from_f64(real)]));
    Var::value_substitute(real, proxy)
}

/// Tracks consecutive codec failures; training skips a failed batch but
/// gives up after `limit` failures in a row.
#[derive(Clone, Debug)]
pub struct FailureBudget {
    limit: usize,
    consecutive: usize,
}

impl FailureBudget {
    pub fn new(limit: usize) -> Self {
        FailureBudget { limit, consecutive: 0 }
    }

    pub fn success(&mut self) {
        self.consecutive = 0;
    }

    /// Records a failure; returns the error once the budget is exhausted.
    pub fn failure(&mut self, err: Error) -> Result<()> {
        self.consecutive += 1;
        log::warn!("skipping batch after codec failure ({} in a row): {err}", self.consecutive);
        if self.consecutive >= self.limit {
            return Err(err);
        }
        Ok(())
    }
}
