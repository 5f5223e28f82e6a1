use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionVars, Checkpoint, EncoderLayerVars, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ingest::RunConfig;
use crate::scalar::Real;

pub(crate) const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const BLOCKS: usize = 4;
const BUFFER_PREFIX: &str = "buffer/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mel_bands: usize,
    pub channels: usize,
    pub emb_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// SED classes including background.
    pub n_classes: usize,
    pub use_transformer: bool,
    pub win_frames: usize,
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig, n_classes: usize) -> Self {
        ModelConfig {
            mel_bands: cfg.mel_bands,
            channels: cfg.channels,
            emb_dim: cfg.emb_dim,
            heads: cfg.heads,
            ffn_dim: cfg.ffn_dim,
            n_classes,
            use_transformer: cfg.use_transformer,
            win_frames: cfg.win_frames,
        }
    }

    pub fn reduced_frames(&self) -> usize {
        self.win_frames.div_ceil(super::UPSAMPLE)
    }

    /// Width of one flattened time step after the four blocks.
    pub fn flat_dim(&self) -> usize {
        self.channels * self.mel_bands / 16
    }

    pub fn token_dim(&self) -> usize {
        2 * self.emb_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.mel_bands == 0 || !self.mel_bands.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "mel bands {} must be a positive multiple of 16",
                self.mel_bands
            )));
        }
        if self.channels == 0 || self.emb_dim == 0 || self.ffn_dim == 0 || self.win_frames == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.heads == 0 || !self.token_dim().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "token dim {} is not divisible by {} heads",
                self.token_dim(),
                self.heads
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need background plus at least one class".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with this window's statistics and report them.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Batch statistics collected during a training-mode forward pass.
#[derive(Clone, Debug, Default)]
pub struct BnStats<T> {
    entries: Vec<(usize, Vec<T>, Vec<T>)>,
}

impl<T> BnStats<T> {
    pub(crate) fn push(&mut self, block: usize, mean: Vec<T>, var: Vec<T>) {
        self.entries.push((block, mean, var));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Coarse parameter groups used to freeze parts of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Conv blocks 1 and 2.
    Stem,
    /// Conv blocks 3 and 4.
    Head,
    Embed,
    Transformer,
    DecoderSed,
    DecoderSfbc,
    DecoderBin,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("block1.") || name.starts_with("block2.") {
            ParamGroup::Stem
        } else if name.starts_with("block") {
            ParamGroup::Head
        } else if name.starts_with("embed.") {
            ParamGroup::Embed
        } else if name.starts_with("tf.") {
            ParamGroup::Transformer
        } else if name.starts_with("decoder_sed.") {
            ParamGroup::DecoderSed
        } else if name.starts_with("decoder_sfbc.") {
            ParamGroup::DecoderSfbc
        } else {
            ParamGroup::DecoderBin
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// Class names by SED index; index 0 is background.
    pub classes: Vec<String>,
    pub params: IndexMap<String, Tensor<T>>,
    /// BN running statistics.
    pub buffers: IndexMap<String, Tensor<T>>,
}

/// Parameters placed on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }

    pub(crate) fn encoder(&self) -> Result<EncoderLayerVars> {
        let g = |s: &str| self.get(&format!("tf.{s}"));
        Ok(EncoderLayerVars {
            ln1_gamma: g("ln1.gamma")?,
            ln1_beta: g("ln1.beta")?,
            attn: AttentionVars {
                wq: g("attn.wq")?,
                bq: g("attn.bq")?,
                wk: g("attn.wk")?,
                bk: g("attn.bk")?,
                wv: g("attn.wv")?,
                bv: g("attn.bv")?,
                wo: g("attn.wo")?,
                bo: g("attn.bo")?,
            },
            ln2_gamma: g("ln2.gamma")?,
            ln2_beta: g("ln2.beta")?,
            ff1_w: g("ff1.weight")?,
            ff1_b: g("ff1.bias")?,
            ff2_w: g("ff2.weight")?,
            ff2_b: g("ff2.bias")?,
        })
    }

    /// Gradients of every trainable parameter that received one.
    pub fn collect<T: Real>(&self, tape: &Tape<T>, grads: &mut Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(_, &v)| tape.requires_grad(v))
            .filter_map(|(n, &v)| grads.take(v).map(|g| (n.clone(), g)))
            .collect()
    }
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl<T: Real> Model<T> {
    /// Conv weights use He-uniform bounds, linear weights `1/sqrt(fan_in)`;
    /// biases start at zero, norm scales at one.
    pub fn new(config: ModelConfig, classes: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes.len() != config.n_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                classes.len(),
                config.n_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        let c = config.channels;
        for i in 1..=BLOCKS {
            let cin = if i == 1 { 1 } else { c };
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            params.insert(
                format!("block{i}.conv.weight"),
                uniform(&mut rng, &[c, cin, 3, 3], bound),
            );
            params.insert(format!("block{i}.conv.bias"), Tensor::zeros([c]));
            params.insert(format!("block{i}.bn.gamma"), Tensor::full([c], T::one()));
            params.insert(format!("block{i}.bn.beta"), Tensor::zeros([c]));
            buffers.insert(format!("block{i}.bn.running_mean"), Tensor::zeros([c]));
            buffers.insert(format!("block{i}.bn.running_var"), Tensor::full([c], T::one()));
        }
        let linear =
            |params: &mut IndexMap<String, Tensor<T>>, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize| {
                let bound = 1.0 / (inp as f64).sqrt();
                params.insert(format!("{name}.weight"), uniform(rng, &[out, inp], bound));
                params.insert(format!("{name}.bias"), Tensor::zeros([out]));
            };
        let (e, d) = (config.emb_dim, config.token_dim());
        linear(&mut params, &mut rng, "embed", e, config.flat_dim());
        params.insert("tf.ln1.gamma".into(), Tensor::full([d], T::one()));
        params.insert("tf.ln1.beta".into(), Tensor::zeros([d]));
        for p in ["q", "k", "v", "o"] {
            let bound = 1.0 / (d as f64).sqrt();
            params.insert(format!("tf.attn.w{p}"), uniform(&mut rng, &[d, d], bound));
            params.insert(format!("tf.attn.b{p}"), Tensor::zeros([d]));
        }
        params.insert("tf.ln2.gamma".into(), Tensor::full([d], T::one()));
        params.insert("tf.ln2.beta".into(), Tensor::zeros([d]));
        linear(&mut params, &mut rng, "tf.ff1", config.ffn_dim, d);
        linear(&mut params, &mut rng, "tf.ff2", d, config.ffn_dim);
        linear(&mut params, &mut rng, "decoder_sed", config.n_classes, e);
        linear(&mut params, &mut rng, "decoder_sfbc", 2, d);
        linear(&mut params, &mut rng, "decoder_bin", 2, e);
        Ok(Model {
            config,
            classes,
            params,
            buffers,
        })
    }

    /// Places every parameter on `tape`; those failing `trainable` become
    /// constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if trainable(n) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }

    pub(crate) fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no buffer {name}")))
    }

    /// Exponential moving average of BN statistics (momentum 0.1).
    pub fn update_running_stats(&mut self, stats: &BnStats<T>) -> Result<()> {
        let m = T::lit(BN_MOMENTUM);
        for (block, mean, var) in &stats.entries {
            for (key, batch) in [("running_mean", mean), ("running_var", var)] {
                let name = format!("block{block}.bn.{key}");
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::Config(format!("model has no buffer {name}")))?;
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({
            "model": self.config,
            "classes": self.classes,
            "extra": extra,
        });
        let mut ck = Checkpoint::new(meta.to_string());
        for (n, t) in &self.params {
            ck.tensors.insert(n.clone(), t.cast());
        }
        for (n, t) in &self.buffers {
            ck.tensors.insert(format!("{BUFFER_PREFIX}{n}"), t.cast());
        }
        ck
    }

    /// Rebuilds the model and returns the extra metadata stored with it.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, serde_json::Value)> {
        #[derive(Deserialize)]
        struct Meta {
            model: ModelConfig,
            classes: Vec<String>,
            #[serde(default)]
            extra: serde_json::Value,
        }
        let meta: Meta =
            serde_json::from_str(&ck.meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let mut model = Model::<T>::new(meta.model, meta.classes, 0)?;
        let mut seen = 0;
        for (n, t) in &ck.tensors {
            let slot = match n.strip_prefix(BUFFER_PREFIX) {
                Some(b) => model.buffers.get_mut(b),
                None => model.params.get_mut(n),
            }
            .ok_or_else(|| Error::Format(format!("unexpected checkpoint tensor {n}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {n} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.cast();
            seen += 1;
        }
        if seen != model.params.len() + model.buffers.len() {
            return Err(Error::Format("checkpoint is missing model tensors".into()));
        }
        Ok((model, meta.extra))
    }
}
