pub mod autograd;
pub mod codec_bridge;
pub mod config;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod npp;
pub mod params;
pub mod proxy;
pub mod scalar;
pub mod task_head;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use autograd::{Conv2dSpec, Gradients, Graph, Var};
pub use codec_bridge::{CodecKind, CodecResult, RatePoint, RateSchedule, TraditionalCodec};
pub use data_io::ImageBatch;
pub use error::{Error, Result};
pub use evaluation::{CurvePoint, RateAccuracyCurve};
pub use params::{Adam, Bound, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
