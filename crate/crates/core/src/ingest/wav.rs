use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Mono waveform with amplitudes in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Real> AudioClip<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Validation("non-finite audio sample".into()));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn cast<U: Real>(&self) -> AudioClip<U> {
        AudioClip {
            samples: self.samples.iter().map(|&s| U::lit(s.as_f64())).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => Error::Unsupported(format!("{}: unsupported codec", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads PCM integer (8/16/24/32 bit) or 32-bit float WAV, averaging channels.
pub fn read_wav<T: Real>(path: &Path) -> Result<AudioClip<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    // the file opened, so read failures past this point are malformed content
    let content_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Format(format!("{}: {io}", path.display())),
        other => hound_err(path, other),
    };
    let reader = WavReader::new(std::io::BufReader::new(file)).map_err(content_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(content_err)?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 2f64.powi(bits as i32 - 1);
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(content_err)?
        }
        (fmt, bits) => {
            return Err(Error::Unsupported(format!(
                "{}: {bits}-bit {fmt:?} samples",
                path.display()
            )))
        }
    };
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| T::lit(frame.iter().sum::<f64>() / channels as f64))
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Quantizes a sample to the 16-bit grid used by [`write_wav`].
pub fn quantize_i16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes mono 16-bit PCM.
pub fn write_wav<T: Real>(path: &Path, clip: &AudioClip<T>) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in &clip.samples {
        w.write_sample(quantize_i16(s.as_f64()))
            .map_err(|e| hound_err(path, e))?;
    }
    w.finalize().map_err(|e| hound_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_raw(path: &Path, channels: u16, bits: u16, fmt: SampleFormat, frames: &[i32]) {
        let spec = WavSpec {
            channels,
            sample_rate: 8000,
            bits_per_sample: bits,
            sample_format: fmt,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &f in frames {
            match bits {
                8 => w.write_sample(f as i8).unwrap(),
                16 => w.write_sample(f as i16).unwrap(),
                _ => w.write_sample(f).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn sixteen_bit_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, 1, 16, SampleFormat::Int, &[16384, 0, -32768]);
        let c: AudioClip<f64> = read_wav(&p).unwrap();
        assert_eq!(c.samples, vec![0.5, 0.0, -1.0]);
        assert_eq!(c.sample_rate, 8000);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.2f32).unwrap();
        w.write_sample(0.4f32).unwrap();
        w.finalize().unwrap();
        let c: AudioClip<f64> = read_wav(&p).unwrap();
        assert!((c.samples[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn eight_and_twentyfour_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("8.wav");
        write_raw(&p, 1, 8, SampleFormat::Int, &[64]);
        let c: AudioClip<f64> = read_wav(&p).unwrap();
        assert_eq!(c.samples, vec![0.5]);
        let p = dir.path().join("24.wav");
        write_raw(&p, 1, 24, SampleFormat::Int, &[1 << 22]);
        let c: AudioClip<f32> = read_wav(&p).unwrap();
        assert_eq!(c.samples, vec![0.5]);
    }

    #[test]
    fn malformed_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.wav");
        std::fs::write(&p, b"RIFF\x00\x00\x00\x00WAVEjunkjunk").unwrap();
        assert!(matches!(read_wav::<f64>(&p), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn sixteen_bit_round_trip(values in proptest::collection::vec(any::<i16>(), 1..200)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.wav");
            let clip = AudioClip::new(values.iter().map(|&v| v as f64 / 32768.0).collect(), 22050).unwrap();
            write_wav(&p, &clip).unwrap();
            let back: AudioClip<f64> = read_wav(&p).unwrap();
            let q: Vec<i16> = back.samples.iter().map(|&s| quantize_i16(s)).collect();
            prop_assert_eq!(q, values);
            prop_assert_eq!(back, clip);
        }
    }
}
