//! Binary feature dump: `"PCEN" | u32 frames | u32 bands | f32 frame period`
//! followed by `frames × bands` little-endian f32 values, row major.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::pcen::FrameFeatures;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const FEATURE_MAGIC: &[u8; 4] = b"PCEN";
pub const HEADER_LEN: usize = 16;

pub fn features_to_bytes<T: Real>(f: &FrameFeatures<T>) -> Vec<u8> {
    let (frames, bands) = f.values.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * frames * bands);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(bands as u32).to_le_bytes());
    out.extend_from_slice(&(f.frame_period_s as f32).to_le_bytes());
    for v in f.values.iter() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn features_from_bytes<T: Real>(bytes: &[u8]) -> Result<FrameFeatures<T>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format("not a PCEN feature dump".into()));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let frames = u32::from_le_bytes(word(4)) as usize;
    let bands = u32::from_le_bytes(word(8)) as usize;
    let period = f32::from_le_bytes(word(12)) as f64;
    if bytes.len() != HEADER_LEN + 4 * frames * bands {
        return Err(Error::Format(format!(
            "feature dump holds {} bytes, header says {frames}x{bands}",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let values = Array2::from_shape_vec((frames, bands), data).map_err(|e| Error::Format(e.to_string()))?;
    Ok(FrameFeatures {
        values,
        frame_period_s: period,
    })
}

pub fn write_features<T: Real>(path: &Path, f: &FrameFeatures<T>) -> Result<()> {
    fs::write(path, features_to_bytes(f)).map_err(|e| Error::io(path, e))
}

pub fn read_features<T: Real>(path: &Path) -> Result<FrameFeatures<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    features_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_f32() {
        let f = FrameFeatures {
            values: Array2::from_shape_fn((3, 2), |(t, b)| t as f64 + 0.5 * b as f64),
            frame_period_s: 256.0 / 22050.0,
        };
        let bytes = features_to_bytes(&f);
        assert_eq!(bytes.len(), 16 + 24);
        let back: FrameFeatures<f64> = features_from_bytes(&bytes).unwrap();
        assert_eq!(back.values, f.values);
        assert!((back.frame_period_s - f.frame_period_s).abs() < 1e-8);
        assert!(features_from_bytes::<f64>(&bytes[..20]).is_err());
        assert!(features_from_bytes::<f64>(b"NOPE00000000000000").is_err());
    }
}
