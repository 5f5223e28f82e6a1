use ndarray::Array2;
use rand::Rng;

use crate::ingest::RunConfig;
use crate::scalar::Real;

/// Piecewise-linear dB gain over random time zones of a window.
#[derive(Clone, Debug, PartialEq)]
pub struct AugSpec {
    pub zones: usize,
    pub db_low: f64,
    pub db_high: f64,
    pub min_zone: usize,
}

impl AugSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        AugSpec {
            zones: cfg.aug_zones,
            db_low: cfg.aug_db_low,
            db_high: cfg.aug_db_high,
            min_zone: cfg.aug_min_zone,
        }
    }

    /// Zone count for a window of `len` frames: reduced until every zone
    /// can hold `min_zone` frames; zero means the window is too short.
    pub fn zone_count(&self, len: usize) -> usize {
        if self.min_zone == 0 {
            return self.zones.min(len);
        }
        self.zones.min(len / self.min_zone)
    }
}

/// Per-frame linear gains for zones of `lengths` with `lengths.len() + 1`
/// knots. Within a zone of length `L` the blend runs from the left knot to
/// the right knot over `L` frames, both endpoints included.
pub fn zone_gains(lengths: &[usize], knots: &[f64], spec: &AugSpec) -> Vec<f64> {
    assert_eq!(knots.len(), lengths.len() + 1, "one knot per zone boundary");
    let mut gains = Vec::with_capacity(lengths.iter().sum());
    for (i, &len) in lengths.iter().enumerate() {
        let (a, b) = (knots[i], knots[i + 1]);
        for j in 0..len {
            let alpha = if len == 1 {
                a
            } else {
                a + (b - a) * j as f64 / (len - 1) as f64
            };
            let db = spec.db_low + (spec.db_high - spec.db_low) * alpha;
            gains.push(10f64.powf(db / 20.0));
        }
    }
    gains
}

/// Scales row `t` of `window` by `gains[t]`.
pub fn apply_gains<T: Real>(window: &Array2<T>, gains: &[f64]) -> Array2<T> {
    let mut out = window.clone();
    for (mut row, &g) in out.rows_mut().into_iter().zip(gains) {
        let g = T::lit(g);
        row.mapv_inplace(|v| v * g);
    }
    out
}

/// Random zone lengths, each at least `min_zone`, summing to `len`.
fn zone_lengths<R: Rng>(len: usize, m: usize, min_zone: usize, rng: &mut R) -> Vec<usize> {
    let extra = len - m * min_zone;
    let mut cuts: Vec<usize> = (0..m - 1).map(|_| rng.random_range(0..=extra)).collect();
    cuts.sort_unstable();
    let mut prev = 0;
    let mut out = Vec::with_capacity(m);
    for c in cuts.into_iter().chain(std::iter::once(extra)) {
        out.push(min_zone + c - prev);
        prev = c;
    }
    out
}

/// Draws zones and knots from `rng` and applies the gain curve. Windows
/// shorter than one zone are returned unchanged.
pub fn time_filter_aug<T: Real, R: Rng>(window: &Array2<T>, spec: &AugSpec, rng: &mut R) -> Array2<T> {
    let len = window.nrows();
    let m = spec.zone_count(len);
    if m == 0 {
        return window.clone();
    }
    let lengths = zone_lengths(len, m, spec.min_zone, rng);
    let knots: Vec<f64> = (0..=m).map(|_| rng.random_range(0.0..=1.0)).collect();
    apply_gains(window, &zone_gains(&lengths, &knots, spec))
}
