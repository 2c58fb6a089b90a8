//! Parameter initialization and layer helpers shared by the networks.

use rand::Rng;

use crate::autograd::{Conv2dSpec, Var};
use crate::error::Result;
use crate::params::{he_uniform, Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adds `<name>.w` (`out x inp x k x k`) and a zero `<name>.b`.
/// With `zero` the weight is zero as well.
pub fn init_conv(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, out: usize, inp: usize, k: usize, zero: bool) -> Result<()> {
    let shape = [out, inp, k, k];
    let w = if zero { Tensor::zeros(&shape) } else { he_uniform(rng, &shape, inp * k * k) };
    ps.insert(format!("{name}.w"), w)?;
    ps.insert(format!("{name}.b"), Tensor::zeros(&[out]))
}

/// Adds `<name>.w` (`out x inp`) and a zero `<name>.b`.
pub fn init_linear(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, out: usize, inp: usize, zero: bool) -> Result<()> {
    let w = if zero { Tensor::zeros(&[out, inp]) } else { he_uniform(rng, &[out, inp], inp) };
    ps.insert(format!("{name}.w"), w)?;
    ps.insert(format!("{name}.b"), Tensor::zeros(&[out]))
}

pub fn conv<'g, T: Scalar>(b: &Bound<'g, T>, name: &str, x: Var<'g, T>, spec: Conv2dSpec) -> Var<'g, T> {
    x.conv2d(b.get(&format!("{name}.w")), Some(b.get(&format!("{name}.b"))), spec)
}

pub fn linear<'g, T: Scalar>(b: &Bound<'g, T>, name: &str, x: Var<'g, T>) -> Var<'g, T> {
    x.linear(b.get(&format!("{name}.w")), b.get(&format!("{name}.b")))
}

/// Bottom/right padding that brings `n` up to a multiple of `m`.
pub fn pad_to_multiple(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m - n
}
