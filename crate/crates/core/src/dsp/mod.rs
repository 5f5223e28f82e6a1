//! Waveform to PCEN frontend and waveform-level augmentation.

mod dump;
mod mel;
mod pcen;
mod resample;

pub use dump::{features_from_bytes, features_to_bytes, read_features, write_features};
pub use mel::{
    hann, hz_to_mel, mel_band_centers, mel_filterbank, mel_project, mel_to_hz, power_stft, stft_mel, MelFrames,
    StftParams,
};
pub use pcen::{pcen, FrameFeatures, PcenParams};
pub use resample::{resample, resample_ratio, speed_perturb};

use crate::error::Result;
use crate::ingest::{AudioClip, RunConfig};
use crate::scalar::Real;

/// Resamples to the configured rate when needed, then computes PCEN features.
pub fn extract_features<T: Real>(clip: &AudioClip<T>, cfg: &RunConfig) -> Result<FrameFeatures<T>> {
    let clip = resample(clip, cfg.sample_rate)?;
    let mel = stft_mel(&clip, &StftParams::from_config(cfg))?;
    pcen(&mel, &PcenParams::from_config(cfg))
}
