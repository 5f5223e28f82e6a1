//! Power STFT projected through a Slaney mel filterbank.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::ingest::{AudioClip, RunConfig};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct StftParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub mel_bands: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl StftParams {
    pub fn from_config(cfg: &RunConfig) -> Self {
        StftParams {
            sample_rate: cfg.sample_rate,
            n_fft: cfg.n_fft,
            hop: cfg.hop,
            mel_bands: cfg.mel_bands,
            fmin: cfg.fmin,
            fmax: cfg.effective_fmax(),
        }
    }

    pub fn frame_period_s(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }
}

impl Default for StftParams {
    fn default() -> Self {
        Self::from_config(&RunConfig::default())
    }
}

/// Mel energies, `[frames × bands]`, all non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFrames<T> {
    pub values: Array2<T>,
    pub frame_period_s: f64,
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= min_log_hz {
        min_log_hz / f_sp + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// Center frequencies (Hz) of the `bands` triangles.
pub fn mel_band_centers(bands: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (1..=bands)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64))
        .collect()
}

/// Triangular filters with area normalization, `[n_fft/2 + 1 bins × bands]`.
pub fn mel_filterbank<T: Real>(p: &StftParams) -> Result<Array2<T>> {
    let nyquist = p.sample_rate as f64 / 2.0;
    if !(p.fmin >= 0.0 && p.fmin < p.fmax && p.fmax <= nyquist) {
        return Err(Error::Config(format!(
            "mel range [{}, {}] must lie within [0, {nyquist}]",
            p.fmin, p.fmax
        )));
    }
    let bins = p.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(p.fmin), hz_to_mel(p.fmax));
    let edges: Vec<f64> = (0..p.mel_bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (p.mel_bands + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((bins, p.mel_bands));
    for b in 0..p.mel_bands {
        let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
        let enorm = 2.0 / (r - l);
        for k in 0..bins {
            let f = k as f64 * p.sample_rate as f64 / p.n_fft as f64;
            let w = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
            fb[[k, b]] = T::lit(w * enorm);
        }
    }
    Ok(fb)
}

/// Periodic Hann window.
pub fn hann<T: Real>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| T::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= len as isize { period - m } else { m }) as usize
}

/// Magnitude-squared STFT with a centered, reflect-padded Hann window,
/// `[1 + len/hop frames × n_fft/2 + 1 bins]`.
pub fn power_stft<T: Real>(samples: &[T], n_fft: usize, hop: usize) -> Result<Array2<T>> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot take the STFT of an empty clip".into()));
    }
    if n_fft < 2 || hop == 0 {
        return Err(Error::Config("n_fft must be at least 2 and hop positive".into()));
    }
    let frames = 1 + samples.len() / hop;
    let bins = n_fft / 2 + 1;
    let pad = (n_fft / 2) as isize;
    let window = hann::<T>(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];
    let mut out = Array2::zeros((frames, bins));
    for t in 0..frames {
        let start = (t * hop) as isize - pad;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = samples[reflect(start + i as isize, samples.len())];
            *slot = Complex::new(s * window[i], T::zero());
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, c) in buf[..bins].iter().enumerate() {
            out[[t, k]] = c.re * c.re + c.im * c.im;
        }
    }
    Ok(out)
}

/// Projects a power spectrogram onto the mel bands.
pub fn mel_project<T: Real>(power: &Array2<T>, fb: &Array2<T>) -> Array2<T> {
    power.dot(fb)
}

pub fn stft_mel<T: Real>(clip: &AudioClip<T>, p: &StftParams) -> Result<MelFrames<T>> {
    if clip.sample_rate != p.sample_rate {
        return Err(Error::Validation(format!(
            "clip is at {} Hz but features expect {} Hz",
            clip.sample_rate, p.sample_rate
        )));
    }
    let fb = mel_filterbank::<T>(p)?;
    let power = power_stft(&clip.samples, p.n_fft, p.hop)?;
    let values = mel_project(&power, &fb);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite mel energy".into()));
    }
    Ok(MelFrames {
        values,
        frame_period_s: p.frame_period_s(),
    })
}
