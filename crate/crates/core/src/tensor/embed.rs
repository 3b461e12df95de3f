use super::Tensor;
use crate::error::{Error, Result};

/// Ratio between the highest and lowest embedding frequency.
const FREQ_SPAN: f64 = 1000.0;

/// Sinusoidal time embedding with base frequency 1. See [`time_embedding_with_base`].
pub fn time_embedding(t: f64, dim: usize) -> Result<Tensor> {
    time_embedding_with_base(t, dim, 1.0)
}

/// `[sin(ω_0 t), …, sin(ω_{h-1} t), cos(ω_0 t), …, cos(ω_{h-1} t)]` with `h = dim / 2`
/// and geometrically spaced `ω_i = base · 1000^(i / h)`.
pub fn time_embedding_with_base(t: f64, dim: usize, base: f64) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("embedding dimension must be even and positive, got {dim}")));
    }
    if !t.is_finite() {
        return Err(Error::Domain(format!("time must be finite, got {t}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = base * FREQ_SPAN.powf(i as f64 / half as f64);
        out[i] = (w * t).sin();
        out[half + i] = (w * t).cos();
    }
    Ok(Tensor::from_vec(out))
}
