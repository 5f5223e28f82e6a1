//! The extractor: four conv blocks, a per-time-step embedding, the SED,
//! binary and foreground/background heads, and the target-class pathway.

mod params;

pub use params::{BnMode, BnStats, Bound, Model, ModelConfig, ParamGroup};

use ndarray::Array2;

use crate::autodiff::{transformer_encoder_layer, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::framing::WindowBatch;
use crate::scalar::Real;

/// Temporal reduction of the backbone, undone by row repetition.
pub const UPSAMPLE: usize = 4;

/// Repeats each row `factor` times and trims to `target` rows.
pub fn repeat_upsample<T: Real>(x: &Tensor<T>, factor: usize, target: usize) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    if factor == 0 || r * factor < target {
        return Err(shape_err!("{r} rows repeated {factor}x cannot cover {target}"));
    }
    let mut out = Vec::with_capacity(target * c);
    for t in 0..target {
        out.extend_from_slice(x.row(t / factor));
    }
    Tensor::new([target, c], out)
}

/// Zeroes every frame whose label is not `target`.
pub fn tc_vector<T: Real>(window: &Array2<T>, labels: &[usize], target: usize) -> Array2<T> {
    let mut out = window.clone();
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        if labels.get(t) != Some(&target) {
            row.fill(T::zero());
        }
    }
    out
}

/// Nearest window before `current` holding a frame of `target`, else
/// `current` itself when it holds one.
pub fn select_tc_window<T>(windows: &[WindowBatch<T>], target: usize, current: usize) -> Result<usize> {
    let has = |w: &WindowBatch<T>| w.sed_labels[..w.valid_frames].contains(&target);
    if let Some(i) = (0..current.min(windows.len())).rev().find(|&i| has(&windows[i])) {
        return Ok(i);
    }
    if windows.get(current).is_some_and(has) {
        return Ok(current);
    }
    Err(Error::Selection(format!(
        "class {target} does not occur up to window {current}"
    )))
}

/// A reduced frame is active when any of the frames it covers is.
pub fn reduce_mask(frames: &[bool], reduced_len: usize) -> Vec<bool> {
    (0..reduced_len)
        .map(|r| frames.iter().skip(r * UPSAMPLE).take(UPSAMPLE).any(|&m| m))
        .collect()
}

impl<T: Real> Model<T> {
    /// `[W×bands]` features as a constant `[1×W×bands]` image.
    pub fn input(&self, tape: &mut Tape<T>, features: &Array2<T>) -> Result<Var> {
        let (w, bands) = features.dim();
        if w != self.config.win_frames || bands != self.config.mel_bands {
            return Err(shape_err!(
                "window is {w}x{bands}, model expects {}x{}",
                self.config.win_frames,
                self.config.mel_bands
            ));
        }
        let data = features.iter().copied().collect();
        Ok(tape.constant(Tensor::new([1, w, bands], data)?))
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        i: usize,
        x: Var,
        mode: BnMode,
        stats: &mut BnStats<T>,
    ) -> Result<Var> {
        let p = |s: &str| b.get(&format!("block{i}.{s}"));
        let h = tape.conv2d(x, p("conv.weight")?, p("conv.bias")?)?;
        let eps = T::lit(params::BN_EPS);
        let h = match mode {
            BnMode::Train => {
                let (v, mean, var) = tape.batch_norm_train(h, p("bn.gamma")?, p("bn.beta")?, eps)?;
                stats.push(i, mean, var);
                v
            }
            BnMode::Eval => {
                let mean = self.buffer(&format!("block{i}.bn.running_mean"))?;
                let var = self.buffer(&format!("block{i}.bn.running_var"))?;
                tape.batch_norm_eval(h, p("bn.gamma")?, p("bn.beta")?, mean.data(), var.data(), eps)?
            }
        };
        let h = tape.relu(h)?;
        if i <= 2 {
            tape.max_pool2d(h, 2, 2)
        } else {
            tape.max_pool2d(h, 1, 2)
        }
    }

    /// Blocks 1 and 2: `[1×W×bands]` to `[C × W/4 × bands/4]`.
    pub fn stem(&self, tape: &mut Tape<T>, b: &Bound, x: Var, mode: BnMode, stats: &mut BnStats<T>) -> Result<Var> {
        let h = self.block(tape, b, 1, x, mode, stats)?;
        self.block(tape, b, 2, h, mode, stats)
    }

    /// Blocks 3 and 4, per-time-step flattening and the embedding projection.
    pub fn head(&self, tape: &mut Tape<T>, b: &Bound, h: Var, mode: BnMode, stats: &mut BnStats<T>) -> Result<Var> {
        let h = self.block(tape, b, 3, h, mode, stats)?;
        let h = self.block(tape, b, 4, h, mode, stats)?;
        let rows = tape.channels_to_rows(h)?;
        tape.linear(rows, b.get("embed.weight")?, b.get("embed.bias")?)
    }

    /// `[1×W×bands]` to the `[W/4 × emb]` embedding.
    pub fn backbone(&self, tape: &mut Tape<T>, b: &Bound, x: Var, mode: BnMode, stats: &mut BnStats<T>) -> Result<Var> {
        let h = self.stem(tape, b, x, mode, stats)?;
        self.head(tape, b, h, mode, stats)
    }

    /// Per-frame class logits `[W×C]`.
    pub fn sed_logits(&self, tape: &mut Tape<T>, b: &Bound, emb: Var) -> Result<Var> {
        let z = tape.linear(emb, b.get("decoder_sed.weight")?, b.get("decoder_sed.bias")?)?;
        tape.repeat_rows(z, UPSAMPLE, self.config.win_frames)
    }

    /// Per-frame NEG/POS logits `[W×2]` of the fine-tuning classifier.
    pub fn bin_logits(&self, tape: &mut Tape<T>, b: &Bound, emb: Var) -> Result<Var> {
        let z = tape.linear(emb, b.get("decoder_bin.weight")?, b.get("decoder_bin.bias")?)?;
        tape.repeat_rows(z, UPSAMPLE, self.config.win_frames)
    }

    /// Masked mean of the target-class window embedding over its active
    /// reduced frames, `[1×emb]`.
    pub fn pos_center(&self, tape: &mut Tape<T>, tc_emb: Var, reduced_mask: &[bool]) -> Result<Var> {
        tape.masked_mean_rows(tc_emb, reduced_mask)
    }

    /// Tokens `[center ; emb_t]` through the encoder layer (when enabled),
    /// `[W/4 × 2·emb]`.
    pub fn sfbc_tokens(&self, tape: &mut Tape<T>, b: &Bound, emb: Var, center: Var) -> Result<Var> {
        let (rows, _) = tape.value(emb).dims2()?;
        let rep = tape.broadcast_row(center, rows)?;
        let tokens = tape.concat_cols(&[rep, emb])?;
        if self.config.use_transformer {
            transformer_encoder_layer(tape, tokens, &b.encoder()?, self.config.heads, true)
        } else {
            Ok(tokens)
        }
    }

    /// Per-frame background/foreground logits `[W×2]` from encoded tokens.
    pub fn sfbc_decode(&self, tape: &mut Tape<T>, b: &Bound, tokens: Var) -> Result<Var> {
        let z = tape.linear(tokens, b.get("decoder_sfbc.weight")?, b.get("decoder_sfbc.bias")?)?;
        tape.repeat_rows(z, UPSAMPLE, self.config.win_frames)
    }

    pub fn sfbc_logits(&self, tape: &mut Tape<T>, b: &Bound, emb: Var, center: Var) -> Result<Var> {
        let tokens = self.sfbc_tokens(tape, b, emb, center)?;
        self.sfbc_decode(tape, b, tokens)
    }

    /// Inference embedding of one window with running BN statistics.
    pub fn embed(&self, features: &Array2<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let x = self.input(&mut tape, features)?;
        let emb = self.backbone(&mut tape, &b, x, BnMode::Eval, &mut BnStats::default())?;
        Ok(tape.value(emb).clone())
    }
}

#[cfg(test)]
mod tests;
