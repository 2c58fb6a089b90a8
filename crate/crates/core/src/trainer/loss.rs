use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::codec_bridge::{encode_decode, quantize8_ste, substitute_scalar, value_substitute, RatePoint, TraditionalCodec};
use crate::data_io::ImageBatch;
use crate::error::{Error, Result};
use crate::npp::Npp;
use crate::params::Bound;
use crate::proxy::{Proxy, QuantMode};
use crate::scalar::Scalar;
use crate::task_head::Classifier;

use super::ForwardMode;

/// Modules that NPP training reads but never updates.
pub struct Frozen {
    pub classifier: Classifier,
    /// Finetuned proxy per rate-point id.
    pub proxies: BTreeMap<u32, Proxy>,
    pub codec: Box<dyn TraditionalCodec>,
}

impl Frozen {
    pub fn proxy(&self, rate_point: RatePoint) -> Result<&Proxy> {
        self.proxies
            .get(&rate_point.id)
            .ok_or_else(|| Error::InvalidInput(format!("no finetuned proxy for rate point {}", rate_point.id)))
    }
}

/// Knobs of the joint loss that tests and the ablations change.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub mode: ForwardMode,
    pub beta: f64,
    pub qa_enabled: bool,
    /// Snap the filtered image to 8 bits before the codec (always on in
    /// training; off only for smooth gradient checks).
    pub quantize_input: bool,
    pub proxy_quant: QuantMode,
}

impl LossOptions {
    pub fn new(mode: ForwardMode, beta: f64, qa_enabled: bool) -> Self {
        LossOptions { mode, beta, qa_enabled, quantize_input: true, proxy_quant: QuantMode::Round }
    }
}

/// Forward values of the loss terms. `total` is recomputed from the three
/// components so that `total == rate + lambda * task + beta * pre` holds
/// exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub rate: f64,
    pub task: f64,
    pub pre: f64,
}

impl LossComponents {
    pub fn assemble(rate: f64, lambda: f64, task: f64, beta: f64, pre: f64) -> Self {
        LossComponents { total: rate + lambda * task + beta * pre, rate, task, pre }
    }
}

/// `L = R + lambda * D_m(X_hat) + beta * MSE(x, X_bar)` for one batch.
///
/// In real mode the codec supplies the forward values of `X_hat` and `R`
/// while the proxy supplies their gradients; in proxy mode the proxy
/// supplies both. `D_pre` uses the filter output before the clamp.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<'g, T: Scalar>(
    npp: &Npp,
    graph: &'g Graph<T>,
    b: &Bound<'g, T>,
    frozen: &Frozen,
    x: &ImageBatch,
    labels: &[usize],
    rate_point: RatePoint,
    opts: LossOptions,
) -> Result<(Var<'g, T>, LossComponents)> {
    let proxy = frozen.proxy(rate_point)?;
    let x_var = graph.constant(x.tensor().cast());
    let out = npp.forward(b, x_var, rate_point, opts.qa_enabled)?;
    let x_bar = if opts.quantize_input { quantize8_ste(out.filtered) } else { out.filtered };

    let proxy_bound = proxy.params.bind(graph, |_| false);
    let p = proxy.forward(&proxy_bound, x_bar, opts.proxy_quant)?;

    let (x_hat, rate) = match opts.mode {
        ForwardMode::Proxy => (p.recon, p.bpp),
        ForwardMode::Real => {
            let coded_input = ImageBatch::new(x_bar.value().cast())?;
            let coded = encode_decode(frozen.codec.as_ref(), &coded_input, rate_point)?;
            let real = graph.constant(coded.recon.tensor().cast());
            (value_substitute(real, p.recon)?, substitute_scalar(coded.bpp, p.bpp)?)
        }
    };

    let task = frozen.classifier.task_loss(&frozen.classifier.params.bind(graph, |_| false), x_hat, labels)?;
    let pre = out.pre_clamp.mse(x_var);
    let total = rate.add(task.scale(T::from_f64(rate_point.lambda))).add(pre.scale(T::from_f64(opts.beta)));
    let comp = LossComponents::assemble(rate.item().to_f64(), rate_point.lambda, task.item().to_f64(), opts.beta, pre.item().to_f64());
    if !(comp.total.is_finite() && total.item().to_f64().is_finite()) {
        return Err(Error::NonFinite(format!("joint loss at rate point {}: {comp:?}", rate_point.id)));
    }
    Ok((total, comp))
}
