//! Central finite-difference checks for every differentiable primitive.
//!
//! Each case is reduced to a scalar through a fixed random projection, so the
//! whole Jacobian participates in the comparison. The reported error is
//! normwise per input: `max|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::{multi_head_attention, transformer_encoder_layer, AttentionVars, EncoderLayerVars};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const STEP: f64 = 1e-5;
const ZERO_GRAD: f64 = 1e-7;

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: OpFn,
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub seeds: usize,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Values bounded away from zero, so ReLU kinks stay out of reach of the step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    randn(rng, shape).map(|x| if x >= 0.0 { x + 0.05 } else { x - 0.05 })
}

/// Distinct values spaced far apart relative to the step, in random order.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

fn attention_vars(v: &[Var]) -> AttentionVars {
    AttentionVars {
        wq: v[0],
        bq: v[1],
        wk: v[2],
        bk: v[3],
        wv: v[4],
        bv: v[5],
        wo: v[6],
        bo: v[7],
    }
}

fn attention_inputs(rng: &mut ChaCha8Rng, d: usize) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    for _ in 0..4 {
        out.push(randn(rng, &[d, d]).map(|x| x * 0.5));
        out.push(randn(rng, &[d]).map(|x| x * 0.1));
    }
    out
}

/// All cases for one seed.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    cases.push(OpCase {
        name: "conv2d",
        inputs: vec![
            randn(&mut rng, &[2, 4, 5]),
            randn(&mut rng, &[3, 2, 3, 3]),
            randn(&mut rng, &[3]),
        ],
        f: Box::new(|t, v| t.conv2d(v[0], v[1], v[2])),
    });
    cases.push(OpCase {
        name: "batchnorm_train",
        inputs: vec![
            randn(&mut rng, &[3, 4, 4]),
            randn(&mut rng, &[3]),
            randn(&mut rng, &[3]),
        ],
        f: Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
    });
    let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
    cases.push(OpCase {
        name: "batchnorm_eval",
        inputs: vec![
            randn(&mut rng, &[3, 4, 4]),
            randn(&mut rng, &[3]),
            randn(&mut rng, &[3]),
        ],
        f: Box::new(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)),
    });
    cases.push(OpCase {
        name: "linear",
        inputs: vec![
            randn(&mut rng, &[4, 5]),
            randn(&mut rng, &[3, 5]),
            randn(&mut rng, &[3]),
        ],
        f: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
    });
    cases.push(OpCase {
        name: "matmul",
        inputs: vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[4, 2])],
        f: Box::new(|t, v| t.matmul(v[0], v[1])),
    });
    cases.push(OpCase {
        name: "relu",
        inputs: vec![away_from_zero(&mut rng, &[4, 5])],
        f: Box::new(|t, v| t.relu(v[0])),
    });
    cases.push(OpCase {
        name: "maxpool2d",
        inputs: vec![spaced(&mut rng, &[2, 5, 5])],
        f: Box::new(|t, v| t.max_pool2d(v[0], 2, 2)),
    });
    cases.push(OpCase {
        name: "layer_norm",
        inputs: vec![randn(&mut rng, &[3, 6]), randn(&mut rng, &[6]), randn(&mut rng, &[6])],
        f: Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
    });
    cases.push(OpCase {
        name: "softmax",
        inputs: vec![randn(&mut rng, &[3, 5])],
        f: Box::new(|t, v| t.softmax_rows(v[0])),
    });
    cases.push(OpCase {
        name: "concat",
        inputs: vec![randn(&mut rng, &[3, 2]), randn(&mut rng, &[3, 4])],
        f: Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
    });
    let mask: Vec<bool> = (0..5).map(|i| i != 2 && (i == 0 || rng.random_bool(0.6))).collect();
    cases.push(OpCase {
        name: "masked_mean",
        inputs: vec![randn(&mut rng, &[5, 3])],
        f: Box::new(move |t, v| t.masked_mean_rows(v[0], &mask)),
    });
    cases.push(OpCase {
        name: "repeat_upsample",
        inputs: vec![randn(&mut rng, &[3, 4])],
        f: Box::new(|t, v| t.repeat_rows(v[0], 2, 5)),
    });
    cases.push(OpCase {
        name: "channels_to_rows",
        inputs: vec![randn(&mut rng, &[2, 3, 4])],
        f: Box::new(|t, v| t.channels_to_rows(v[0])),
    });

    let mut attn_inputs = vec![
        randn(&mut rng, &[5, 16]),
        randn(&mut rng, &[5, 16]),
        randn(&mut rng, &[5, 16]),
    ];
    attn_inputs.extend(attention_inputs(&mut rng, 16));
    cases.push(OpCase {
        name: "attention",
        inputs: attn_inputs,
        f: Box::new(|t, v| multi_head_attention(t, v[0], v[1], v[2], &attention_vars(&v[3..]), 8)),
    });

    let (d, ff) = (8, 16);
    let mut tf_inputs = vec![
        randn(&mut rng, &[4, d]),
        randn(&mut rng, &[d]).map(|x| 1.0 + 0.2 * x),
        randn(&mut rng, &[d]).map(|x| 0.1 * x),
    ];
    tf_inputs.extend(attention_inputs(&mut rng, d));
    tf_inputs.push(randn(&mut rng, &[d]).map(|x| 1.0 + 0.2 * x));
    tf_inputs.push(randn(&mut rng, &[d]).map(|x| 0.1 * x));
    tf_inputs.push(randn(&mut rng, &[ff, d]).map(|x| 0.5 * x));
    tf_inputs.push(randn(&mut rng, &[ff]).map(|x| 0.1 * x));
    tf_inputs.push(randn(&mut rng, &[d, ff]).map(|x| 0.5 * x));
    tf_inputs.push(randn(&mut rng, &[d]).map(|x| 0.1 * x));
    cases.push(OpCase {
        name: "transformer_layer",
        inputs: tf_inputs,
        f: Box::new(|t, v| {
            let p = EncoderLayerVars {
                ln1_gamma: v[1],
                ln1_beta: v[2],
                attn: attention_vars(&v[3..11]),
                ln2_gamma: v[11],
                ln2_beta: v[12],
                ff1_w: v[13],
                ff1_b: v[14],
                ff2_w: v[15],
                ff2_b: v[16],
            };
            transformer_encoder_layer(t, v[0], &p, 2, true)
        }),
    });

    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
    let ce_mask: Vec<bool> = (0..6).map(|i| i % 3 != 1).collect();
    cases.push(OpCase {
        name: "masked_ce",
        inputs: vec![randn(&mut rng, &[6, 4]).map(|x| 2.0 * x)],
        f: Box::new(move |t, v| t.masked_softmax_ce(v[0], &labels, &ce_mask)),
    });
    cases
}

/// Scalar objective `sum(f(inputs) ⊙ R)` for a fixed projection `R`.
fn objective(
    case: &OpCase,
    inputs: &[Tensor<f64>],
    proj: Option<&Tensor<f64>>,
    grad: bool,
) -> Result<(f64, Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if grad {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = (case.f)(&mut tape, &vars)?;
    let loss = match proj {
        Some(r) => {
            let r = tape.constant(r.clone());
            let prod = tape.mul(out, r)?;
            tape.sum_all(prod)?
        }
        None => tape.sum_all(out)?,
    };
    Ok((tape.value(loss).data()[0], tape, vars, loss))
}

/// Max normwise relative error over all inputs of one case.
pub fn check_case(case: &OpCase, seed: u64) -> Result<f64> {
    let mut probe = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = (case.f)(&mut probe, &vars)?;
    let out_shape = probe.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let proj = randn(&mut rng, &out_shape);

    let (_, tape, vars, loss) = objective(case, &case.inputs, Some(&proj), true)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, input) in case.inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut numeric = vec![0.0; input.numel()];
        let mut perturbed = case.inputs.clone();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = input.data()[i];
            perturbed[k].data_mut()[i] = x0 + STEP;
            let fp = objective(case, &perturbed, Some(&proj), false)?.0;
            perturbed[k].data_mut()[i] = x0 - STEP;
            let fm = objective(case, &perturbed, Some(&proj), false)?.0;
            perturbed[k].data_mut()[i] = x0;
            *slot = (fp - fm) / (2.0 * STEP);
        }
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (a, n) in analytic.data().iter().zip(&numeric) {
            diff = diff.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
        // An input with an identically zero gradient (e.g. the key bias,
        // which cancels inside the softmax) is compared absolutely.
        worst = worst.max(if scale < ZERO_GRAD { diff } else { diff / scale });
    }
    Ok(worst)
}

/// Runs every case for seeds `0..seeds`, reporting the worst error per op.
pub fn run_suite(seeds: usize) -> Result<Vec<OpReport>> {
    let mut reports: Vec<OpReport> = Vec::new();
    for seed in 0..seeds as u64 {
        for (i, case) in op_cases(seed).into_iter().enumerate() {
            let err = check_case(&case, seed)?;
            if seed == 0 {
                reports.push(OpReport {
                    name: case.name,
                    max_rel_error: err,
                    seeds: 1,
                });
            } else {
                let r = &mut reports[i];
                r.max_rel_error = r.max_rel_error.max(err);
                r.seeds += 1;
            }
        }
    }
    Ok(reports)
}
