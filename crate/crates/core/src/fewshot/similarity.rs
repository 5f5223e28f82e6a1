use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn l2_normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

/// Mean of the rows of `emb` where `mask` holds.
pub fn masked_mean<T: Real>(emb: &Tensor<T>, mask: &[bool]) -> Result<Vec<f64>> {
    let (rows, cols) = emb.dims2()?;
    if mask.len() != rows {
        return Err(Error::Shape(format!("{} mask entries for {rows} rows", mask.len())));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Degenerate("no active frames to average".into()));
    }
    let mut out = vec![0.0; cols];
    for r in (0..rows).filter(|&r| mask[r]) {
        for (o, v) in out.iter_mut().zip(emb.row(r)) {
            *o += v.as_f64();
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Ok(out)
}

/// Mean of the shot embeddings, L2-normalized.
pub fn pos_center(shots: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = shots.first().ok_or_else(|| Error::Degenerate("no POS shots".into()))?;
    let mut mean = vec![0.0; first.len()];
    for s in shots {
        if s.len() != mean.len() {
            return Err(Error::Shape("shot embeddings differ in width".into()));
        }
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= shots.len() as f64);
    l2_normalize(&mean).ok_or_else(|| Error::Degenerate("POS center has zero norm".into()))
}

/// Cosine similarity of every embedding row to the unit `center`, and their
/// maximum. Zero rows score 0.
pub fn query_similarity<T: Real>(emb: &Tensor<T>, center: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (rows, cols) = emb.dims2()?;
    if cols != center.len() {
        return Err(Error::Shape(format!(
            "center width {} for {cols}-wide embeddings",
            center.len()
        )));
    }
    let sims: Vec<f64> = (0..rows)
        .map(|r| {
            let row: Vec<f64> = emb.row(r).iter().map(|v| v.as_f64()).collect();
            l2_normalize(&row).map_or(0.0, |u| {
                u.iter().zip(center).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0)
            })
        })
        .collect();
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((sims, max))
}

/// `max(min, round(frac * n))`, capped at `n`.
pub fn neg_quota(n: usize, frac: f64, min: usize) -> usize {
    ((frac * n as f64).round() as usize).max(min).min(n)
}

/// Indices of the `quota` lowest scores, ascending by score with ties going
/// to the earlier index.
pub fn reconstruct_negatives(scores: &[f64], quota: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(quota);
    idx
}
