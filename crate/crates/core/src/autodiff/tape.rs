//! Reverse-mode tape.
//!
//! Every op evaluates eagerly, stores its output on the tape and records what
//! it needs to propagate gradients. Nodes that do not depend on any trainable
//! leaf are never visited during the backward sweep.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        cols: Vec<T>,
        dims: (usize, usize, usize, usize),
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    ChannelsToRows(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxRows(Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RepeatRows {
        input: Var,
        factor: usize,
    },
    BroadcastRow(Var),
    WeightedRowSum {
        input: Var,
        weights: Vec<T>,
    },
    Reshape(Var),
    SumAll(Var),
    MaskedSoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `out = beta * out + a * b` with optional transposes, via ndarray's gemm.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    a: &[T],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[T],
    b_dims: (usize, usize),
    trans_b: bool,
    out: &mut [T],
    beta: T,
) {
    let av = ArrayView2::from_shape(a_dims, a).expect("gemm lhs");
    let bv = ArrayView2::from_shape(b_dims, b).expect("gemm rhs");
    let av = if trans_a { av.reversed_axes() } else { av };
    let bv = if trans_b { bv.reversed_axes() } else { bv };
    let mut cv = ArrayViewMut2::from_shape((av.nrows(), bv.ncols()), out).expect("gemm out");
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}

fn add_into<T: Real>(dst: &mut Option<Tensor<T>>, src: Tensor<T>) {
    match dst {
        Some(d) => {
            for (a, b) in d.data_mut().iter_mut().zip(src.data()) {
                *a += *b;
            }
        }
        None => *dst = Some(src),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &str) -> Result<Var> {
        if !T::all_finite(value.data()) {
            return Err(Error::Numeric(format!("non-finite output from {name}")));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err!("{what}: {:?} vs {:?}", sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += y;
        }
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng, "scale")
    }

    /// `x[r, c] + b[c]` for a 2-D `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = self.value(x).dims2()?;
        if self.value(b).numel() != cols {
            return Err(shape_err!("bias of {} for {} columns", self.value(b).numel(), cols));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::AddRowBias(x, b), ng, "add_row_bias")
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            self.value(a).data(),
            (m, k),
            false,
            self.value(b).data(),
            (k, n),
            false,
            &mut out,
            T::zero(),
        );
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), ng, "matmul")
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul_nt inner dims {k} vs {k2}"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            self.value(a).data(),
            (m, k),
            false,
            self.value(b).data(),
            (n, k),
            true,
            &mut out,
            T::zero(),
        );
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new([m, n], out)?, Op::MatMulNT(a, b), ng, "matmul_nt")
    }

    /// Affine map with a weight stored as `[out × in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul_nt(x, weight)?;
        self.add_row_bias(y, bias)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng, "relu")
    }

    /// Stride-1 same-padded cross-correlation of `[Cin×H×W]` with `[Cout×Cin×k×k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (cin, h, w) = self.value(input).dims3()?;
        let ws = self.value(weight).shape().to_vec();
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(shape_err!("conv weight must be 4-D, got {:?}", ws));
        };
        if wcin != cin || kh != kw || kh % 2 == 0 {
            return Err(shape_err!("conv weight {:?} does not fit input [{cin}, {h}, {w}]", ws));
        }
        if self.value(bias).numel() != cout {
            return Err(shape_err!("conv bias needs {cout} values"));
        }
        let k = kh;
        let pad = k / 2;
        let hw = h * w;
        let rows = cin * k * k;
        let mut cols = vec![T::zero(); rows * hw];
        {
            let x = self.value(input).data();
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let r = (ci * k + ky) * k + kx;
                        let dst = &mut cols[r * hw..(r + 1) * hw];
                        for y in 0..h {
                            let sy = y as isize + ky as isize - pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = &x[(ci * h + sy as usize) * w..(ci * h + sy as usize + 1) * w];
                            let drow = &mut dst[y * w..(y + 1) * w];
                            // output columns whose source column sx = xx + kx - pad is in range
                            let lo = pad.saturating_sub(kx);
                            let hi = (w + pad).saturating_sub(kx).min(w);
                            if lo < hi {
                                drow[lo..hi].copy_from_slice(&src[lo + kx - pad..hi + kx - pad]);
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![T::zero(); cout * hw];
        let b = self.value(bias).data();
        for co in 0..cout {
            out[co * hw..(co + 1) * hw].fill(b[co]);
        }
        gemm(
            self.value(weight).data(),
            (cout, rows),
            false,
            &cols,
            (rows, hw),
            false,
            &mut out,
            T::one(),
        );
        let ng = self.ng(&[input, weight, bias]);
        self.push(
            Tensor::new([cout, h, w], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                dims: (cin, h, w, k),
            },
            ng,
            "conv2d",
        )
    }

    /// Per-channel normalization of `[C×H×W]` using the statistics of this input.
    ///
    /// Returns the output together with the batch mean and unbiased variance,
    /// which the caller folds into its running statistics.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (c, h, w) = self.value(input).dims3()?;
        self.check_channel_params(c, gamma, beta)?;
        let n = h * w;
        let nt = T::lit(n as f64);
        let x = self.value(input).data();
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        let mut means = vec![T::zero(); c];
        let mut unbiased = vec![T::zero(); c];
        for ch in 0..c {
            let xs = &x[ch * n..(ch + 1) * n];
            let mean = xs.iter().copied().sum::<T>() / nt;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in xhat[ch * n..(ch + 1) * n].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
            inv_std[ch] = is;
            means[ch] = mean;
            unbiased[ch] = if n > 1 { var * nt / T::lit((n - 1) as f64) } else { var };
        }
        let out = self.affine_channels(&xhat, c, n, gamma, beta);
        let ng = self.ng(&[input, gamma, beta]);
        let v = self.push(
            Tensor::new([c, h, w], out)?,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
            "batch_norm_train",
        )?;
        Ok((v, means, unbiased))
    }

    /// Per-channel normalization with fixed statistics (inference mode).
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        self.check_channel_params(c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("running stats need {c} channels"));
        }
        let n = h * w;
        let x = self.value(input).data();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); c * n];
        for ch in 0..c {
            for (o, &v) in xhat[ch * n..(ch + 1) * n].iter_mut().zip(&x[ch * n..(ch + 1) * n]) {
                *o = (v - mean[ch]) * inv_std[ch];
            }
        }
        let out = self.affine_channels(&xhat, c, n, gamma, beta);
        let ng = self.ng(&[input, gamma, beta]);
        self.push(
            Tensor::new([c, h, w], out)?,
            Op::ChannelAffine {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
            "batch_norm_eval",
        )
    }

    fn check_channel_params(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err!("norm affine params need {c} channels"));
        }
        Ok(())
    }

    fn affine_channels(&self, xhat: &[T], c: usize, n: usize, gamma: Var, beta: Var) -> Vec<T> {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(&xhat[ch * n..(ch + 1) * n]) {
                *o = g[ch] * v + b[ch];
            }
        }
        out
    }

    /// Max pooling over `[C×H×W]` with non-overlapping `ph×pw` cells; partial
    /// cells at the border are kept (ceil mode).
    pub fn max_pool2d(&mut self, input: Var, ph: usize, pw: usize) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if ph == 0 || pw == 0 {
            return Err(shape_err!("pool size must be positive"));
        }
        let oh = h.div_ceil(ph);
        let ow = w.div_ceil(pw);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                let (ys, ye) = (oy * ph, (oy * ph + ph).min(h));
                for ox in 0..ow {
                    let (xs, xe) = (ox * pw, (ox * pw + pw).min(w));
                    let mut best_i = (ch * h + ys) * w + xs;
                    let mut best = x[best_i];
                    for y in ys..ye {
                        let base = (ch * h + y) * w;
                        for (j, &v) in x[base + xs..base + xe].iter().enumerate() {
                            if v > best {
                                best = v;
                                best_i = base + xs + j;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let ng = self.ng(&[input]);
        self.push(
            Tensor::new([c, oh, ow], out)?,
            Op::MaxPool2d { input, argmax },
            ng,
            "max_pool2d",
        )
    }

    /// `[C×H×W]` to `[H × C·W]`: one row per time step.
    pub fn channels_to_rows(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for y in 0..h {
                out[y * c * w + ch * w..y * c * w + (ch + 1) * w]
                    .copy_from_slice(&x[(ch * h + y) * w..(ch * h + y + 1) * w]);
            }
        }
        let ng = self.ng(&[input]);
        self.push(
            Tensor::new([h, c * w], out)?,
            Op::ChannelsToRows(input),
            ng,
            "channels_to_rows",
        )
    }

    /// Normalizes each row of a 2-D tensor, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (r, d) = self.value(input).dims2()?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(shape_err!("layer norm params need {d} values"));
        }
        let dt = T::lit(d as f64);
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); r * d];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * d];
        for i in 0..r {
            let xs = &x[i * d..(i + 1) * d];
            let mean = xs.iter().copied().sum::<T>() / dt;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let xh = (xs[j] - mean) * is;
                xhat[i * d + j] = xh;
                out[i * d + j] = g[j] * xh + b[j];
            }
        }
        let ng = self.ng(&[input, gamma, beta]);
        self.push(
            Tensor::new([r, d], out)?,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
            "layer_norm",
        )
    }

    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let (r, c) = self.value(input).dims2()?;
        let mut out = self.value(input).clone();
        for i in 0..r {
            softmax_in_place(&mut out.data_mut()[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[input]);
        self.push(out, Op::SoftmaxRows(input), ng, "softmax_rows")
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(input).dims2()?;
        if start + len > c {
            return Err(shape_err!("column slice {start}+{len} exceeds {c}"));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(&[input]);
        self.push(
            Tensor::new([r, len], out)?,
            Op::SliceCols { input, start },
            ng,
            "slice_cols",
        )
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat of nothing"));
        }
        let r = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(shape_err!("concat rows {pr} vs {r}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * wd..(i + 1) * wd]);
            }
        }
        let ng = self.ng(parts);
        self.push(
            Tensor::new([r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
            "concat_cols",
        )
    }

    /// Repeats every row `factor` times and keeps the first `target` rows.
    pub fn repeat_rows(&mut self, input: Var, factor: usize, target: usize) -> Result<Var> {
        let (r, c) = self.value(input).dims2()?;
        if factor == 0 || r * factor < target {
            return Err(shape_err!("{r} rows repeated {factor}x cannot cover {target} rows"));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(target * c);
        for t in 0..target {
            let src = t / factor;
            out.extend_from_slice(&x[src * c..(src + 1) * c]);
        }
        let ng = self.ng(&[input]);
        self.push(
            Tensor::new([target, c], out)?,
            Op::RepeatRows { input, factor },
            ng,
            "repeat_rows",
        )
    }

    /// Tiles a single row (`[1×D]` or `[D]`) into `[rows×D]`.
    pub fn broadcast_row(&mut self, input: Var, rows: usize) -> Result<Var> {
        let d = self.value(input).numel();
        let x = self.value(input).data().to_vec();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(&x);
        }
        let ng = self.ng(&[input]);
        self.push(
            Tensor::new([rows, d], out)?,
            Op::BroadcastRow(input),
            ng,
            "broadcast_row",
        )
    }

    /// Mean of the rows selected by `mask`, as a `[1×D]` tensor.
    pub fn masked_mean_rows(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let (r, _) = self.value(input).dims2()?;
        if mask.len() != r {
            return Err(shape_err!("mask of {} for {} rows", mask.len(), r));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("masked mean over zero rows".into()));
        }
        let inv = T::one() / T::lit(count as f64);
        let weights: Vec<T> = mask.iter().map(|&m| if m { inv } else { T::zero() }).collect();
        self.weighted_row_sum(input, weights)
    }

    fn weighted_row_sum(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        let (r, d) = self.value(input).dims2()?;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); d];
        for i in 0..r {
            if weights[i] == T::zero() {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(&x[i * d..(i + 1) * d]) {
                *o += weights[i] * v;
            }
        }
        let ng = self.ng(&[input]);
        self.push(
            Tensor::new([1, d], out)?,
            Op::WeightedRowSum { input, weights },
            ng,
            "masked_mean_rows",
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape.to_vec())?;
        let ng = self.ng(&[input]);
        self.push(out, Op::Reshape(input), ng, "reshape")
    }

    pub fn sum_all(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().copied().sum::<T>();
        let ng = self.ng(&[input]);
        self.push(Tensor::scalar(s), Op::SumAll(input), ng, "sum_all")
    }

    /// Cross-entropy over rows of `logits[T×C]`, averaged over rows with
    /// `mask == true`. Masked-out rows contribute nothing, not even to the
    /// gradient. An all-masked input yields a zero loss.
    pub fn masked_softmax_ce(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2()?;
        if labels.len() != r || mask.len() != r {
            return Err(shape_err!(
                "labels {} / mask {} for {} rows",
                labels.len(),
                mask.len(),
                r
            ));
        }
        if let Some(&bad) = labels.iter().zip(mask).find(|(&l, &m)| m && l >= c).map(|(l, _)| l) {
            return Err(shape_err!("label {bad} out of range for {c} classes"));
        }
        let active = mask.iter().filter(|&&m| m).count();
        let norm = T::one() / T::lit(active.max(1) as f64);
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); r * c];
        let mut weights = vec![T::zero(); r];
        let mut loss = T::zero();
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            loss += (lse - row[labels[i]]) * norm;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            weights[i] = norm;
        }
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::MaskedSoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
                weights,
            },
            ng,
            "masked_softmax_ce",
        )
    }

    /// Reverse sweep from `loss`, seeded with ones.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.nodes[v.0].needs_grad {
            add_into(&mut grads[v.0], g);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for (o, &y) in ga.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *o *= y;
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = g.clone();
                    for (o, &y) in gb.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *o *= y;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let (_, cols) = g.dims2()?;
                    let mut gb = vec![T::zero(); cols];
                    for row in g.data().chunks(cols) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, gb)?);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        g.data(),
                        (m, n),
                        false,
                        self.value(*b).data(),
                        (k, n),
                        true,
                        &mut ga,
                        T::zero(),
                    );
                    self.accumulate(grads, *a, Tensor::new([m, k], ga)?);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(
                        self.value(*a).data(),
                        (m, k),
                        true,
                        g.data(),
                        (m, n),
                        false,
                        &mut gb,
                        T::zero(),
                    );
                    self.accumulate(grads, *b, Tensor::new([k, n], gb)?);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.0;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        g.data(),
                        (m, n),
                        false,
                        self.value(*b).data(),
                        (n, k),
                        false,
                        &mut ga,
                        T::zero(),
                    );
                    self.accumulate(grads, *a, Tensor::new([m, k], ga)?);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); n * k];
                    gemm(
                        g.data(),
                        (m, n),
                        true,
                        self.value(*a).data(),
                        (m, k),
                        false,
                        &mut gb,
                        T::zero(),
                    );
                    self.accumulate(grads, *b, Tensor::new([n, k], gb)?);
                }
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                for (o, &x) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if x <= T::zero() {
                        *o = T::zero();
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                dims: (cin, h, w, k),
            } => {
                let (cin, h, w, k) = (*cin, *h, *w, *k);
                let hw = h * w;
                let rows = cin * k * k;
                let cout = self.value(*weight).shape()[0];
                if self.wants(*bias) {
                    let gb: Vec<T> = g.data().chunks(hw).map(|c| c.iter().copied().sum::<T>()).collect();
                    self.accumulate(grads, *bias, Tensor::new([cout], gb)?);
                }
                if self.wants(*weight) {
                    let mut gw = vec![T::zero(); cout * rows];
                    gemm(g.data(), (cout, hw), false, cols, (rows, hw), true, &mut gw, T::zero());
                    self.accumulate(grads, *weight, Tensor::new([cout, cin, k, k], gw)?);
                }
                if self.wants(*input) {
                    let mut gcols = vec![T::zero(); rows * hw];
                    gemm(
                        self.value(*weight).data(),
                        (cout, rows),
                        true,
                        g.data(),
                        (cout, hw),
                        false,
                        &mut gcols,
                        T::zero(),
                    );
                    let pad = k / 2;
                    let mut gx = vec![T::zero(); cin * hw];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let r = (ci * k + ky) * k + kx;
                                let src = &gcols[r * hw..(r + 1) * hw];
                                for y in 0..h {
                                    let sy = y as isize + ky as isize - pad as isize;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    let base = (ci * h + sy as usize) * w;
                                    let lo = pad.saturating_sub(kx);
                                    let hi = (w + pad).saturating_sub(kx).min(w);
                                    if lo < hi {
                                        let dst = &mut gx[base + lo + kx - pad..base + hi + kx - pad];
                                        for (d, &v) in dst.iter_mut().zip(&src[y * w + lo..y * w + hi]) {
                                            *d += v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new([cin, h, w], gx)?);
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (c, h, w) = g.dims3()?;
                let n = h * w;
                let nt = T::lit(n as f64);
                let gam = self.value(*gamma).data();
                let mut gg = vec![T::zero(); c];
                let mut gbt = vec![T::zero(); c];
                let mut gx = vec![T::zero(); c * n];
                for ch in 0..c {
                    let gs = &g.data()[ch * n..(ch + 1) * n];
                    let xs = &xhat[ch * n..(ch + 1) * n];
                    let sum_g: T = gs.iter().copied().sum();
                    let sum_gx: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                    gg[ch] = sum_gx;
                    gbt[ch] = sum_g;
                    let scale = gam[ch] * inv_std[ch] / nt;
                    for j in 0..n {
                        gx[ch * n + j] = scale * (nt * gs[j] - sum_g - xs[j] * sum_gx);
                    }
                }
                self.accumulate(grads, *gamma, Tensor::new([c], gg)?);
                self.accumulate(grads, *beta, Tensor::new([c], gbt)?);
                self.accumulate(grads, *input, Tensor::new([c, h, w], gx)?);
            }
            Op::ChannelAffine {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (c, h, w) = g.dims3()?;
                let n = h * w;
                let gam = self.value(*gamma).data();
                let mut gg = vec![T::zero(); c];
                let mut gbt = vec![T::zero(); c];
                let mut gx = vec![T::zero(); c * n];
                for ch in 0..c {
                    for j in 0..n {
                        let gv = g.data()[ch * n + j];
                        gg[ch] += gv * xhat[ch * n + j];
                        gbt[ch] += gv;
                        gx[ch * n + j] = gv * gam[ch] * inv_std[ch];
                    }
                }
                self.accumulate(grads, *gamma, Tensor::new([c], gg)?);
                self.accumulate(grads, *beta, Tensor::new([c], gbt)?);
                self.accumulate(grads, *input, Tensor::new([c, h, w], gx)?);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gx = Tensor::zeros(self.value(*input).shape().to_vec());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                self.accumulate(grads, *input, gx);
            }
            Op::ChannelsToRows(input) => {
                let (c, h, w) = self.value(*input).dims3()?;
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        gx[(ch * h + y) * w..(ch * h + y + 1) * w]
                            .copy_from_slice(&g.data()[y * c * w + ch * w..y * c * w + (ch + 1) * w]);
                    }
                }
                self.accumulate(grads, *input, Tensor::new([c, h, w], gx)?);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, d) = g.dims2()?;
                let dt = T::lit(d as f64);
                let gam = self.value(*gamma).data();
                let mut gg = vec![T::zero(); d];
                let mut gbt = vec![T::zero(); d];
                let mut gx = vec![T::zero(); r * d];
                for i in 0..r {
                    let gs = &g.data()[i * d..(i + 1) * d];
                    let xs = &xhat[i * d..(i + 1) * d];
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..d {
                        gg[j] += gs[j] * xs[j];
                        gbt[j] += gs[j];
                        let dxh = gs[j] * gam[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xs[j];
                    }
                    for j in 0..d {
                        let dxh = gs[j] * gam[j];
                        gx[i * d + j] = inv_std[i] / dt * (dt * dxh - sum_dxh - xs[j] * sum_dxh_xh);
                    }
                }
                self.accumulate(grads, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), gg)?);
                self.accumulate(grads, *beta, Tensor::new(self.value(*beta).shape().to_vec(), gbt)?);
                self.accumulate(grads, *input, Tensor::new([r, d], gx)?);
            }
            Op::SoftmaxRows(input) => {
                let (r, c) = g.dims2()?;
                let y = node.value.data();
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g.data()[i * c..(i + 1) * c];
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.accumulate(grads, *input, Tensor::new([r, c], gx)?);
            }
            Op::SliceCols { input, start } => {
                let (r, c) = self.value(*input).dims2()?;
                let len = g.dims2()?.1;
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *input, Tensor::new([r, c], gx)?);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let wd = self.value(p).dims2()?.1;
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(r * wd);
                        for i in 0..r {
                            gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + wd]);
                        }
                        self.accumulate(grads, p, Tensor::new([r, wd], gp)?);
                    }
                    offset += wd;
                }
            }
            Op::RepeatRows { input, factor } => {
                let (r, c) = self.value(*input).dims2()?;
                let target = g.dims2()?.0;
                let mut gx = vec![T::zero(); r * c];
                for t in 0..target {
                    let src = t / factor;
                    for j in 0..c {
                        gx[src * c + j] += g.data()[t * c + j];
                    }
                }
                self.accumulate(grads, *input, Tensor::new([r, c], gx)?);
            }
            Op::BroadcastRow(input) => {
                let d = self.value(*input).numel();
                let mut gx = vec![T::zero(); d];
                for row in g.data().chunks(d) {
                    for (o, &v) in gx.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, Tensor::new(shape, gx)?);
            }
            Op::WeightedRowSum { input, weights } => {
                let (r, d) = self.value(*input).dims2()?;
                let mut gx = vec![T::zero(); r * d];
                for i in 0..r {
                    if weights[i] == T::zero() {
                        continue;
                    }
                    for j in 0..d {
                        gx[i * d + j] = weights[i] * g.data()[j];
                    }
                }
                self.accumulate(grads, *input, Tensor::new([r, d], gx)?);
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, g.clone().reshape(shape)?);
            }
            Op::SumAll(input) => {
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, Tensor::full(shape, g.data()[0]));
            }
            Op::MaskedSoftmaxCe {
                logits,
                probs,
                labels,
                weights,
            } => {
                let (r, c) = self.value(*logits).dims2()?;
                let upstream = g.data()[0];
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    if weights[i] == T::zero() {
                        continue;
                    }
                    let s = weights[i] * upstream;
                    for j in 0..c {
                        let onehot = if j == labels[i] { T::one() } else { T::zero() };
                        gx[i * c + j] = s * (probs[i * c + j] - onehot);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new([r, c], gx)?);
            }
        }
        Ok(())
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
