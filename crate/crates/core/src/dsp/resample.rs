//! Kaiser-windowed sinc resampling and speed perturbation.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::ingest::AudioClip;
use crate::scalar::Real;

/// Zero crossings of the sinc kernel on each side, at the passband edge.
const ZERO_CROSSINGS: f64 = 16.0;
const KAISER_BETA: f64 = 8.0;
/// Cutoff as a fraction of the lower Nyquist rate.
const ROLLOFF: f64 = 0.95;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Resamples by `ratio = output rate / input rate`. The output has
/// `round(len · ratio)` samples.
pub fn resample_ratio<T: Real>(x: &[T], ratio: f64) -> Result<Vec<T>> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::Validation(format!("resampling ratio {ratio} must be positive")));
    }
    if ratio == 1.0 {
        return Ok(x.to_vec());
    }
    let n_out = (x.len() as f64 * ratio).round() as usize;
    let fc = ROLLOFF * ratio.min(1.0);
    let half = ZERO_CROSSINGS / fc;
    let norm = bessel_i0(KAISER_BETA);
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let center = j as f64 / ratio;
        let lo = (center - half).ceil().max(0.0) as usize;
        let hi = ((center + half).floor() as usize).min(x.len().saturating_sub(1));
        let mut acc = 0.0;
        for (k, &v) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let d = center - k as f64;
            let u = d / half;
            let w = bessel_i0(KAISER_BETA * (1.0 - u * u).max(0.0).sqrt()) / norm;
            let arg = PI * fc * d;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
            acc += v.as_f64() * fc * sinc * w;
        }
        if !acc.is_finite() {
            return Err(Error::Numeric("non-finite resampled sample".into()));
        }
        out.push(T::lit(acc));
    }
    Ok(out)
}

pub fn resample<T: Real>(clip: &AudioClip<T>, target_hz: u32) -> Result<AudioClip<T>> {
    if target_hz == 0 {
        return Err(Error::Validation("target sample rate must be positive".into()));
    }
    if target_hz == clip.sample_rate {
        return Ok(clip.clone());
    }
    let ratio = target_hz as f64 / clip.sample_rate as f64;
    AudioClip::new(resample_ratio(&clip.samples, ratio)?, target_hz)
}

/// Plays the clip `factor` times faster at the original rate, shifting pitch
/// and tempo together. Annotation times must be multiplied by the returned
/// time scale `1 / factor`.
pub fn speed_perturb<T: Real>(clip: &AudioClip<T>, factor: f64) -> Result<(AudioClip<T>, f64)> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::Validation(format!("speed factor {factor} must be positive")));
    }
    let samples = resample_ratio(&clip.samples, 1.0 / factor)?;
    Ok((AudioClip::new(samples, clip.sample_rate)?, 1.0 / factor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn tone(freq: f64, sr: u32, secs: f64) -> AudioClip<f64> {
        let n = (sr as f64 * secs) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect();
        AudioClip::new(s, sr).unwrap()
    }

    fn peak_hz(clip: &AudioClip<f64>) -> f64 {
        let mut buf: Vec<Complex<f64>> = clip.samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let half = &buf[..buf.len() / 2];
        let k = (0..half.len())
            .max_by(|&a, &b| half[a].norm().total_cmp(&half[b].norm()))
            .unwrap();
        k as f64 * clip.sample_rate as f64 / buf.len() as f64
    }

    #[test]
    fn same_rate_is_identity() {
        let c = tone(440.0, 22050, 0.1);
        assert_eq!(resample(&c, 22050).unwrap(), c);
    }

    #[test]
    fn downsampled_tone_keeps_its_frequency() {
        let out = resample(&tone(1000.0, 44100, 1.0), 22050).unwrap();
        assert_eq!(out.samples.len(), 22050);
        // one FFT bin is 1 Hz for a one second clip
        assert!((peak_hz(&out) - 1000.0).abs() <= 1.0);
        let mid: f64 = out.samples[5000..17000].iter().map(|v| v * v).sum::<f64>() / 12000.0;
        assert!((mid.sqrt() - 0.5 / 2f64.sqrt()).abs() < 0.02);
    }

    #[test]
    fn content_above_new_nyquist_is_suppressed() {
        let out = resample(&tone(15000.0, 44100, 0.5), 22050).unwrap();
        let rms = (out.samples[1000..10000].iter().map(|v| v * v).sum::<f64>() / 9000.0).sqrt();
        assert!(rms < 1e-3, "{rms}");
    }

    #[test]
    fn speed_perturbation_lengths_and_scale() {
        let c = tone(440.0, 22050, 1.1);
        let (same, s1) = speed_perturb(&c, 1.0).unwrap();
        assert_eq!((same, s1), (c.clone(), 1.0));
        let (fast, s) = speed_perturb(&c, 1.1).unwrap();
        assert!((fast.samples.len() as i64 - 22050).abs() <= 1);
        assert_eq!(fast.sample_rate, 22050);
        assert!((s - 1.0 / 1.1).abs() < 1e-15);
        let (_, slow) = speed_perturb(&c, 0.9).unwrap();
        assert!((2.0 * slow - 2.222).abs() < 1e-3 && (3.0 * slow - 3.333).abs() < 1e-3);
    }

    #[test]
    fn bad_arguments() {
        let c = tone(440.0, 22050, 0.1);
        assert!(resample(&c, 0).is_err());
        assert!(speed_perturb(&c, 0.0).is_err());
    }
}
