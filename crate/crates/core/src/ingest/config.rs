//! Flat `key = value` run configuration. Every key is optional.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How the background row of the SED decoder is replaced during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraftMode {
    /// L2-normalized POS center embedding.
    PosCenter,
    /// Class-1 weights of the binary POS/NEG decoder.
    BinaryClassOne,
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> { s.parse().ok() }
            fn render(&self) -> String { self.to_string() }
        }
    )*};
}
from_str_value!(u32, u64, usize, bool);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> Option<Self> {
        s.split(',').map(|p| p.trim().parse().ok()).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for GraftMode {
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "pos_center" => Some(GraftMode::PosCenter),
            "binary_class_one" => Some(GraftMode::BinaryClassOne),
            _ => None,
        }
    }
    fn render(&self) -> String {
        match self {
            GraftMode::PosCenter => "pos_center".into(),
            GraftMode::BinaryClassOne => "binary_class_one".into(),
        }
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr,)*) => {
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $name: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($name: $default,)* }
            }
        }

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value).ok_or_else(|| {
                            Error::Config(format!("bad value {value:?} for {key}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// Canonical `key = value` rendering of every field.
            pub fn to_kv(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($name), ConfigValue::render(&self.$name));)*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 0,
    sample_rate: u32 = 22050,
    n_fft: usize = 1024,
    hop: usize = 256,
    mel_bands: usize = 128,
    fmin: f64 = 0.0,
    /// Upper mel edge in Hz; 0 means Nyquist.
    fmax: f64 = 0.0,
    pcen_s: f64 = 0.025,
    pcen_alpha: f64 = 0.98,
    pcen_delta: f64 = 2.0,
    pcen_r: f64 = 0.5,
    pcen_eps: f64 = 1e-6,
    win_frames: usize = 431,
    shift_frames: usize = 86,
    /// Time scale factors for speed perturbation of pretraining audio.
    speed_factors: Vec<f64> = vec![0.9, 1.0, 1.1],
    channels: usize = 128,
    emb_dim: usize = 128,
    heads: usize = 8,
    ffn_dim: usize = 2048,
    multitask: bool = true,
    use_transformer: bool = true,
    lr_pretrain: f64 = 1e-4,
    lr_sed: f64 = 1e-3,
    lr_sfbc: f64 = 1e-4,
    step_size: usize = 10,
    gamma: f64 = 0.5,
    /// Pretraining epochs.
    iters: usize = 100,
    /// Cap on (window, class) steps per pretraining epoch; 0 means no cap.
    pretrain_max_steps: usize = 0,
    kfold: usize = 5,
    finetune_iters: usize = 100,
    finetune_batch: usize = 4,
    base_batch: usize = 1,
    sfbc_iters: usize = 100,
    support_windows: usize = 32,
    neg_quota_frac: f64 = 0.2,
    neg_quota_min: usize = 2,
    graft: GraftMode = GraftMode::PosCenter,
    time_filter_aug: bool = true,
    aug_start_iter: usize = 40,
    aug_zones: usize = 6,
    aug_min_zone: usize = 48,
    aug_db_low: f64 = -6.0,
    aug_db_high: f64 = 8.0,
    pseudo_cycles: usize = 3,
    pseudo_iters: usize = 20,
    pseudo_pos: f64 = 0.9,
    pseudo_neg: f64 = 0.1,
    threshold: f64 = 0.5,
    median_width: usize = 5,
    min_dur_s: f64 = 0.06,
    merge_gap_s: f64 = 0.1,
    iou: f64 = 0.3,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        RunConfig::default().with_text(text)
    }

    /// Applies the `key = value` lines of `text` on top of `self`.
    pub fn with_text(mut self, text: &str) -> Result<Self> {
        let cfg = &mut self;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.win_frames > self.shift_frames && self.shift_frames > 0) {
            return fail("need win_frames > shift_frames > 0");
        }
        if self.aug_db_low >= self.aug_db_high {
            return fail("need aug_db_low < aug_db_high");
        }
        if self.sample_rate == 0 || self.hop == 0 || self.n_fft == 0 || self.mel_bands == 0 {
            return fail("sample_rate, hop, n_fft and mel_bands must be positive");
        }
        if !self.mel_bands.is_multiple_of(16) {
            return fail("mel_bands must be a multiple of 16");
        }
        if self.kfold == 0 || self.iters == 0 {
            return fail("kfold and iters must be positive");
        }
        if self.heads == 0 || !(2 * self.emb_dim).is_multiple_of(self.heads) {
            return fail("2 * emb_dim must be divisible by heads");
        }
        if self.speed_factors.is_empty() || self.speed_factors.iter().any(|&f| f <= 0.0) {
            return fail("speed_factors must be positive");
        }
        Ok(())
    }

    pub fn frame_period_s(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    pub fn effective_fmax(&self) -> f64 {
        if self.fmax > 0.0 {
            self.fmax
        } else {
            self.sample_rate as f64 / 2.0
        }
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
