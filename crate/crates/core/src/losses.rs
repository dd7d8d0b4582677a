//! Training objectives built on the tape, plus plain-float reference forms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Per-example focal loss `-(1 - p_y)^gamma log p_y` from logits `[B, C]`,
/// averaged over the batch. `gamma = 0` is plain cross-entropy.
pub fn focal_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    gamma: f64,
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    let logp = g.log_softmax(logits);
    let lp = g.pick_last(logp, labels)?;
    let mut per = g.neg(lp);
    if gamma != 0.0 {
        let p = g.exp(lp);
        let q = g.neg(p);
        let q = g.add_scalar(q, T::one());
        let w = g.powf(q, T::of(gamma));
        per = g.mul(per, w)?;
    }
    if let Some(cw) = class_weights {
        let w: Vec<T> = labels.iter().map(|&y| T::of(cw[y])).collect();
        let w = g.constant(Tensor::from_vec(w));
        per = g.mul(per, w)?;
    }
    Ok(g.mean(per))
}

/// Reference focal loss from class probabilities (floored at 1e-12).
pub fn focal_loss_probs(probs: &[Vec<f64>], labels: &[usize], gamma: f64) -> f64 {
    let n = labels.len().max(1) as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let py = p[y].max(1e-12);
            -(1.0 - py).powf(gamma) * py.ln()
        })
        .sum::<f64>()
        / n
}

/// Contrastive loss between anchors `z` and positives `z_pos` (`[B, d]`).
/// Row `b`'s positive is `z_pos[b]`; the other rows of `z_pos` are its
/// negatives, and the positive is part of the denominator.
pub fn info_nce<T: Real>(g: &mut Graph<T>, z: Var, z_pos: Var, tau: f64) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || g.shape(z_pos) != shape.as_slice() {
        return Err(Error::shape("info_nce", &shape, g.shape(z_pos)));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::Invalid("info_nce needs a batch of at least 2 (no negatives)".into()));
    }
    let eps = T::of(1e-12);
    let a = g.l2_normalize(z, eps);
    let p = g.l2_normalize(z_pos, eps);
    let pt = g.transpose(p)?;
    let sim = g.matmul(a, pt)?;
    let logits = g.scale(sim, T::of(1.0 / tau));
    let logp = g.log_softmax(logits);
    let diag: Vec<usize> = (0..b).collect();
    let d = g.pick_last(logp, &diag)?;
    let m = g.mean(d);
    Ok(g.neg(m))
}

/// Mean squared error between `pred: [M, k]` and a constant target.
pub fn mse<T: Real>(g: &mut Graph<T>, pred: Var, target: Tensor<T>) -> Result<Var> {
    let t = g.constant(target);
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Sum over classes of binary cross-entropies against a 0/1 indicator,
/// averaged over rows: `softplus(z) - y z`.
pub fn multilabel_bce<T: Real>(g: &mut Graph<T>, logits: Var, indicator: Tensor<T>) -> Result<Var> {
    let rows = g.shape(logits)[0].max(1);
    let y = g.constant(indicator);
    let sp = g.softplus(logits);
    let yz = g.mul(y, logits)?;
    let l = g.sub(sp, yz)?;
    let s = g.sum(l);
    Ok(g.scale(s, T::one() / T::of(rows as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub num: f64,
    pub ce: f64,
    pub mcat: f64,
    pub con: f64,
    pub emb: f64,
    pub memb: f64,
    /// InfoNCE temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            num: 1.0,
            ce: 1.0,
            mcat: 1.0,
            con: 1.0,
            emb: 1.0,
            memb: 1.0,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.num, self.ce, self.mcat, self.con, self.emb, self.memb]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if a.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        Ok(())
    }
}

/// The six pre-training terms, in the order num, ce, mcat, con, emb, memb.
/// A term is `None` when the batch has nothing to score for it.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<V> {
    pub num: Option<V>,
    pub ce: Option<V>,
    pub mcat: Option<V>,
    pub con: Option<V>,
    pub emb: Option<V>,
    pub memb: Option<V>,
}

impl<V> Default for LossParts<V> {
    fn default() -> Self {
        Self {
            num: None,
            ce: None,
            mcat: None,
            con: None,
            emb: None,
            memb: None,
        }
    }
}

impl<V: Copy> LossParts<V> {
    pub fn as_array(&self) -> [Option<V>; 6] {
        [self.num, self.ce, self.mcat, self.con, self.emb, self.memb]
    }
}

/// `sum_k w_k L_k` over the present terms.
pub fn total_loss<T: Real>(g: &mut Graph<T>, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (p, wk) in parts.as_array().into_iter().zip(w.as_array()) {
        let Some(p) = p else { continue };
        if wk == 0.0 {
            continue;
        }
        let term = g.scale(p, T::of(wk));
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Invalid("no pre-training loss term is active for this batch".into()))
}

/// Plain-float counterpart of [`total_loss`].
pub fn weighted_total(parts: &[f64; 6], w: &LossWeights) -> f64 {
    parts.iter().zip(w.as_array()).map(|(p, w)| p * w).sum()
}
