//! Hand-rolled neural layers in f64: forward passes cache what their
//! backward passes need, and every layer exposes its parameters through
//! [`FlatParams`] so optimizers, checkpoints, and fingerprints see one
//! flat, fixed-order vector.

mod adam;
mod attention;
mod conv;
mod linear;
mod norm;
pub mod ops;

pub use adam::Adam;
pub use attention::{AttnCache, AttnGrads, MultiHeadAttention};
pub use conv::{Conv2d, ConvGrads};
pub use linear::{Linear, LinearGrads};
pub use norm::{LayerNorm, LnCache, LnGrads};

use crate::error::{Error, Result};

/// Fixed-order traversal of trainable scalars.
pub trait FlatParams {
    fn param_len(&self) -> usize;
    fn write_params(&self, out: &mut Vec<f64>);
    /// Consume this component's prefix of `data`.
    fn read_params(&mut self, data: &mut &[f64]);
}

pub fn params_to_vec(m: &impl FlatParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.param_len());
    m.write_params(&mut out);
    debug_assert_eq!(out.len(), m.param_len());
    out
}

pub fn params_from_vec(m: &mut impl FlatParams, data: &[f64]) -> Result<()> {
    if data.len() != m.param_len() {
        return Err(Error::ShapeMismatch(format!(
            "parameter vector has {} values, component expects {}",
            data.len(),
            m.param_len()
        )));
    }
    let mut rest = data;
    m.read_params(&mut rest);
    debug_assert!(rest.is_empty());
    Ok(())
}

pub(crate) fn write_array<D: ndarray::Dimension>(
    arr: &ndarray::Array<f64, D>,
    out: &mut Vec<f64>,
) {
    out.extend(arr.iter());
}

pub(crate) fn read_array<D: ndarray::Dimension>(
    arr: &mut ndarray::Array<f64, D>,
    data: &mut &[f64],
) {
    let n = arr.len();
    for (dst, src) in arr.iter_mut().zip(&data[..n]) {
        *dst = *src;
    }
    *data = &data[n..];
}
