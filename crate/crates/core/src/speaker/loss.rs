use log::warn;
use serde::{Deserialize, Serialize};

use super::net::EmbedNet;
use crate::error::{Error, Result};
use crate::nn::{Scalar, Session, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub scale: f64,
    pub margin: f64,
    pub triplet_margin: f64,
    pub lambda_lmcl: f64,
    pub lambda_triplet: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            scale: 30.0,
            margin: 0.2,
            triplet_margin: 0.3,
            lambda_lmcl: 1.0,
            lambda_triplet: 1.0,
        }
    }
}

/// Large-margin cosine loss over precomputed cosines (`B × classes`).
pub fn lmcl_loss<T: Scalar>(
    s: &mut Session<T>,
    cosines: Var,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<Var> {
    if scale <= 0.0 || !(0.0..1.0).contains(&margin) {
        return Err(Error::invalid(format!(
            "LMCL needs s > 0 and 0 <= m < 1, got s={scale} m={margin}"
        )));
    }
    let (b, c) = (s.value(cosines).rows(), s.value(cosines).cols());
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} embeddings", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let mut m = vec![T::zero(); b * c];
    for (i, &y) in labels.iter().enumerate() {
        m[i * c + y] = T::lit(margin);
    }
    let m = s.constant(Tensor::new(vec![b, c], m)?);
    let shifted = s.sub(cosines, m)?;
    let logits = s.scale(shifted, T::lit(scale));
    s.cross_entropy(logits, labels)
}

/// Hinge on cosine distance: `max(0, d(a,p) − d(a,n) + margin)`.
pub fn triplet_hinge(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

fn row_dots<T: Scalar>(s: &mut Session<T>, a: Var, b: Var) -> Result<Var> {
    let prod = s.mul(a, b)?;
    let cols = s.value(prod).cols();
    let ones = s.constant(Tensor::full(&[cols, 1], T::one()));
    s.matmul(prod, ones)
}

/// Mean triplet hinge over rows of unit-norm anchor/positive/negative
/// matrices, distance `1 − cos`.
pub fn triplet_loss<T: Scalar>(
    s: &mut Session<T>,
    anchor: Var,
    positive: Var,
    negative: Var,
    margin: f64,
) -> Result<Var> {
    let ap = row_dots(s, anchor, positive)?;
    let an = row_dots(s, anchor, negative)?;
    // d(a,p) − d(a,n) = cos(a,n) − cos(a,p)
    let gap = s.sub(an, ap)?;
    let rows = s.value(gap).rows();
    let m = s.constant(Tensor::full(&[rows, 1], T::lit(margin)));
    let shifted = s.add(gap, m)?;
    let hinge = s.relu(shifted);
    Ok(s.mean(hinge))
}

/// Every (anchor, positive) pair in the batch with its hardest negative:
/// the most similar embedding carrying a different label.
pub fn mine_triplets(embeddings: &Tensor<impl Scalar>, labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let b = labels.len();
    let rows: Vec<Vec<f64>> = (0..b)
        .map(|i| embeddings.row(i).iter().map(|v| v.to_f64().unwrap_or(0.0)).collect())
        .collect();
    let cos = |i: usize, j: usize| rows[i].iter().zip(&rows[j]).map(|(x, y)| x * y).sum::<f64>();
    let mut out = Vec::new();
    for a in 0..b {
        let negative = (0..b)
            .filter(|&n| labels[n] != labels[a])
            .max_by(|&x, &y| cos(a, x).total_cmp(&cos(a, y)));
        let Some(n) = negative else { continue };
        for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
            out.push((a, p, n));
        }
    }
    out
}

pub struct MultitaskLoss {
    pub total: Var,
    pub lmcl: Option<Var>,
    pub triplet: Option<Var>,
}

/// `λ_lmcl · LMCL + λ_triplet · triplet` on a batch of unit embeddings.
/// The triplet term is skipped (with a warning) when the batch holds no
/// anchor with both a positive and a negative.
pub fn multitask_loss<T: Scalar>(
    s: &mut Session<T>,
    net: &EmbedNet,
    embeddings: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<MultitaskLoss> {
    let mut terms = Vec::new();
    let mut lmcl = None;
    if cfg.lambda_lmcl != 0.0 {
        let cos = net.cosines(s, embeddings)?;
        let l = lmcl_loss(s, cos, labels, cfg.scale, cfg.margin)?;
        lmcl = Some(l);
        terms.push(s.scale(l, T::lit(cfg.lambda_lmcl)));
    }
    let mut triplet = None;
    if cfg.lambda_triplet != 0.0 {
        let triplets = mine_triplets(s.value(embeddings), labels);
        if triplets.is_empty() {
            warn!("batch has no usable triplets; skipping triplet term");
        } else {
            let a = s.gather_rows(embeddings, &triplets.iter().map(|t| t.0).collect::<Vec<_>>())?;
            let p = s.gather_rows(embeddings, &triplets.iter().map(|t| t.1).collect::<Vec<_>>())?;
            let n = s.gather_rows(embeddings, &triplets.iter().map(|t| t.2).collect::<Vec<_>>())?;
            let l = triplet_loss(s, a, p, n, cfg.triplet_margin)?;
            triplet = Some(l);
            terms.push(s.scale(l, T::lit(cfg.lambda_triplet)));
        }
    }
    let mut total = match terms.first() {
        Some(t) => *t,
        None => return Err(Error::invalid("both loss weights are zero or no term applies")),
    };
    for t in &terms[1..] {
        total = s.add(total, *t)?;
    }
    Ok(MultitaskLoss { total, lmcl, triplet })
}
