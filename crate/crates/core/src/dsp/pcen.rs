//! Per-channel energy normalization over mel frames.

use ndarray::Array2;

use super::mel::MelFrames;
use crate::error::{Error, Result};
use crate::ingest::RunConfig;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcenParams {
    /// Smoother coefficient.
    pub s: f64,
    pub alpha: f64,
    pub delta: f64,
    pub r: f64,
    pub eps: f64,
}

impl PcenParams {
    pub fn from_config(cfg: &RunConfig) -> Self {
        PcenParams {
            s: cfg.pcen_s,
            alpha: cfg.pcen_alpha,
            delta: cfg.pcen_delta,
            r: cfg.pcen_r,
            eps: cfg.pcen_eps,
        }
    }
}

impl Default for PcenParams {
    fn default() -> Self {
        Self::from_config(&RunConfig::default())
    }
}

/// Model input, `[frames × bands]` of PCEN values.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures<T> {
    pub values: Array2<T>,
    pub frame_period_s: f64,
}

impl<T: Real> FrameFeatures<T> {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bands(&self) -> usize {
        self.values.ncols()
    }
}

/// `M(t) = (1 - s) M(t-1) + s E(t)` with `M(0) = E(0)`, then
/// `(E / (eps + M)^alpha + delta)^r - delta^r`, independently per band.
pub fn pcen<T: Real>(mel: &MelFrames<T>, p: &PcenParams) -> Result<FrameFeatures<T>> {
    if mel.values.iter().any(|&v| v < T::zero() || !v.is_finite()) {
        return Err(Error::Validation("PCEN input must be finite and non-negative".into()));
    }
    let (frames, bands) = mel.values.dim();
    let (s, alpha, delta, r, eps) = (
        T::lit(p.s),
        T::lit(p.alpha),
        T::lit(p.delta),
        T::lit(p.r),
        T::lit(p.eps),
    );
    let offset = delta.powf(r);
    let mut out = Array2::zeros((frames, bands));
    for f in 0..bands {
        let mut m = T::zero();
        for t in 0..frames {
            let e = mel.values[[t, f]];
            m = if t == 0 { e } else { (T::one() - s) * m + s * e };
            out[[t, f]] = (e / (eps + m).powf(alpha) + delta).powf(r) - offset;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite PCEN output".into()));
    }
    Ok(FrameFeatures {
        values: out,
        frame_period_s: mel.frame_period_s,
    })
}
