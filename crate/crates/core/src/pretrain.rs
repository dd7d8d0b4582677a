//! Self-supervised pre-training: CutMix in input space, MixUp in token
//! space, per-feature reconstruction and a contrastive term between the
//! clean and augmented views.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::PretrainConfig;
use crate::data::{FeatureValue, Snapshot};
use crate::encoder::Tokens;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::losses::{focal_loss, info_nce, mse, multilabel_bce, total_loss, LossParts};
use crate::model::Model;
use crate::optim::AdamW;
use crate::params::Session;
use crate::rng::substream;
use crate::tensor::{Real, Tensor};
use crate::trunk::Mode;

/// Feature-wise swap: each feature of `x_i` is replaced by `x_j`'s value
/// with probability `swap_prob`. Labels and metadata stay with `x_i`.
pub fn cutmix<R: Rng + ?Sized>(x_i: &Snapshot, x_j: &Snapshot, swap_prob: f64, rng: &mut R) -> Result<Snapshot> {
    if x_i.values.len() != x_j.values.len() {
        return Err(Error::Schema(format!(
            "cutmix partners have {} and {} features",
            x_i.values.len(),
            x_j.values.len()
        )));
    }
    let mut out = x_i.clone();
    for (v, w) in out.values.iter_mut().zip(&x_j.values) {
        if std::mem::discriminant(v) != std::mem::discriminant(w) {
            return Err(Error::Schema("cutmix partners disagree on a feature kind".into()));
        }
        if rng.random::<f64>() < swap_prob {
            *v = w.clone();
        }
    }
    Ok(out)
}

/// `alpha h_i + (1 - alpha) h_j` on the tape.
pub fn mixup<T: Real>(s: &mut Session<'_, T>, h_i: Var, h_j: Var, alpha: f64) -> Result<Var> {
    let a = s.g.scale(h_i, T::of(alpha));
    let b = s.g.scale(h_j, T::of(1.0 - alpha));
    s.g.add(a, b)
}

/// Mean over groups weighted by their element counts.
fn pooled_mean<T: Real>(s: &mut Session<'_, T>, terms: Vec<(Var, usize)>) -> Result<Option<Var>> {
    let total: usize = terms.iter().map(|t| t.1).sum();
    if total == 0 {
        return Ok(None);
    }
    let mut acc: Option<Var> = None;
    for (v, n) in terms {
        let t = s.g.scale(v, T::of(n as f64 / total as f64));
        acc = Some(match acc {
            None => t,
            Some(a) => s.g.add(a, t)?,
        });
    }
    Ok(acc)
}

/// Reconstruction terms for trunk tokens `[B, N, d]` against `targets`.
/// Missing values and padding tokens are excluded. The contrastive slot is
/// left empty.
pub fn reconstruction_losses<T: Real>(
    model: &Model,
    s: &mut Session<'_, T>,
    tokens: Var,
    targets: &[&Snapshot],
) -> Result<LossParts<Var>> {
    let b = targets.len();
    let n = model.encoder.token_count();
    let d = model.config.d;
    let flat = s.g.reshape(tokens, &[b * n, d])?;
    let offsets = model.encoder.token_offsets();
    let mut parts = LossParts::default();

    // numeric: one shared decoder over every observed numeric token
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (fi, &off) in offsets.iter().enumerate() {
        for (r, snap) in targets.iter().enumerate() {
            if let FeatureValue::Numeric(Some(x)) = snap.values[fi] {
                rows.push(r * n + off);
                ys.push(T::of(x));
            }
        }
    }
    if let (Some(dec), false) = (&model.decoders.numeric, rows.is_empty()) {
        let h = s.g.index_select(flat, &rows)?;
        let pred = dec.forward(s, h)?;
        parts.num = Some(mse(&mut s.g, pred, Tensor::new(&[rows.len(), 1], ys)?)?);
    }

    let (mut ce, mut mcat, mut emb, mut memb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (fi, &off) in offsets.iter().enumerate() {
        let Some(dec) = &model.decoders.per_feature[fi] else { continue };
        let mut rows = Vec::new();
        match &targets[0].values[fi] {
            FeatureValue::Categorical(_) => {
                let mut ys = Vec::new();
                for (r, snap) in targets.iter().enumerate() {
                    if let FeatureValue::Categorical(Some(c)) = snap.values[fi] {
                        rows.push(r * n + off);
                        ys.push(c);
                    }
                }
                if !rows.is_empty() {
                    let h = s.g.index_select(flat, &rows)?;
                    let logits = dec.forward(s, h)?;
                    ce.push((focal_loss(&mut s.g, logits, &ys, 0.0, None)?, rows.len()));
                }
            }
            FeatureValue::MultiCategorical(_) => {
                let v = dec.down.d_out;
                let mut ind = Vec::new();
                for (r, snap) in targets.iter().enumerate() {
                    if let FeatureValue::MultiCategorical(Some(cs)) = &snap.values[fi] {
                        rows.push(r * n + off);
                        let mut row = vec![T::zero(); v];
                        for &c in cs {
                            row[c] = T::one();
                        }
                        ind.extend(row);
                    }
                }
                if !rows.is_empty() {
                    let h = s.g.index_select(flat, &rows)?;
                    let logits = dec.forward(s, h)?;
                    let l = multilabel_bce(&mut s.g, logits, Tensor::new(&[rows.len(), v], ind)?)?;
                    mcat.push((l, rows.len()));
                }
            }
            FeatureValue::Embedding(_) => {
                let dim = dec.down.d_out;
                let mut ys = Vec::new();
                for (r, snap) in targets.iter().enumerate() {
                    if let FeatureValue::Embedding(Some(e)) = &snap.values[fi] {
                        rows.push(r * n + off);
                        ys.extend(e.iter().map(|&x| T::of(x as f64)));
                    }
                }
                if !rows.is_empty() {
                    let h = s.g.index_select(flat, &rows)?;
                    let pred = dec.forward(s, h)?;
                    let l = mse(&mut s.g, pred, Tensor::new(&[rows.len(), dim], ys)?)?;
                    emb.push((l, rows.len() * dim));
                }
            }
            FeatureValue::MultiEmbedding(_) => {
                let dim = dec.down.d_out;
                let mut ys = Vec::new();
                for (r, snap) in targets.iter().enumerate() {
                    if let FeatureValue::MultiEmbedding(assets) = &snap.values[fi] {
                        for (j, a) in assets.iter().enumerate() {
                            rows.push(r * n + off + j);
                            ys.extend(a.vector.iter().map(|&x| T::of(x as f64)));
                        }
                    }
                }
                if !rows.is_empty() {
                    let h = s.g.index_select(flat, &rows)?;
                    let pred = dec.forward(s, h)?;
                    let l = mse(&mut s.g, pred, Tensor::new(&[rows.len(), dim], ys)?)?;
                    memb.push((l, rows.len() * dim));
                }
            }
            FeatureValue::Numeric(_) => {}
        }
    }
    parts.ce = pooled_mean(s, ce)?;
    parts.mcat = pooled_mean(s, mcat)?;
    parts.emb = pooled_mean(s, emb)?;
    parts.memb = pooled_mean(s, memb)?;
    Ok(parts)
}

/// One pre-training objective evaluation. `partner[b]` is the CutMix and
/// MixUp partner of row `b`.
pub fn pretrain_objective<T: Real, R: Rng + ?Sized>(
    model: &Model,
    s: &mut Session<'_, T>,
    batch: &[&Snapshot],
    partner: &[usize],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<(Var, LossParts<Var>)> {
    let aug = &cfg.augment;
    let mixed: Vec<Snapshot> = batch
        .iter()
        .zip(partner)
        .map(|(x, &j)| cutmix(x, batch[j], aug.cutmix_swap_prob, rng))
        .collect::<Result<_>>()?;
    let mixed_refs: Vec<&Snapshot> = mixed.iter().collect();

    let clean = model.forward(s, batch, Mode::Pretrain)?;
    let t = model.encoder.encode(s, &mixed_refs, &model.schema)?;
    let x = if aug.mixup_alpha < 1.0 {
        let other = s.g.index_select(t.x, partner)?;
        mixup(s, t.x, other, aug.mixup_alpha)?
    } else {
        t.x
    };
    let view = Tokens { x, mask: t.mask };
    let aug_out = model.trunk.forward(s, &view, Mode::Pretrain)?;

    let mut parts = reconstruction_losses(model, s, aug_out.tokens, batch)?;
    if batch.len() >= 2 {
        let z = model.decoders.contrastive.forward(s, clean.out.pooled)?;
        let zp = model.decoders.contrastive.forward(s, aug_out.pooled)?;
        parts.con = Some(info_nce(&mut s.g, z, zp, cfg.weights.tau)?);
    }
    let total = total_loss(&mut s.g, &parts, &cfg.weights)?;
    Ok((total, parts))
}

/// One line of the loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub total: f64,
    pub num: Option<f64>,
    pub ce: Option<f64>,
    pub mcat: Option<f64>,
    pub con: Option<f64>,
    pub emb: Option<f64>,
    pub memb: Option<f64>,
    pub lr: f64,
}

/// Epoch-style sampler: reshuffles the index list whenever it runs out.
pub struct BatchSampler {
    order: Vec<usize>,
    at: usize,
    rng: crate::rng::Rng,
}

impl BatchSampler {
    pub fn new(n: usize, rng: crate::rng::Rng) -> Self {
        Self {
            order: (0..n).collect(),
            at: n,
            rng,
        }
    }

    pub fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.at == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.at = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.at);
            out.extend_from_slice(&self.order[self.at..self.at + take]);
            self.at += take;
        }
        out
    }
}

/// Runs `cfg.steps` pre-training steps, calling `on_step` with each record.
pub fn pretrain(
    model: &mut Model,
    data: &[&Snapshot],
    cfg: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&PretrainRecord),
) -> Result<Vec<PretrainRecord>> {
    if data.len() < 2 {
        return Err(Error::Invalid("pre-training needs at least 2 snapshots".into()));
    }
    let mut sampler = BatchSampler::new(data.len(), substream(seed, "data.pretrain"));
    let mut aug_rng = substream(seed, "augment");
    let mut opt = AdamW::<f32>::new(cfg.optimizer);
    let sched = cfg.schedule.build(cfg.steps, crate::config::PRETRAIN_WARMUP_MULTIPLIER);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next(cfg.batch_size);
        let batch: Vec<&Snapshot> = idx.iter().map(|&i| data[i]).collect();
        let mut partner: Vec<usize> = (0..batch.len()).collect();
        partner.shuffle(&mut aug_rng);
        let lr = sched.lr_at(step);
        let (rec, grads) = {
            let mut s = Session::new(&model.store);
            let (total, parts) = pretrain_objective(model, &mut s, &batch, &partner, cfg, &mut aug_rng)?;
            let val = |v: Option<Var>| v.map(|v| s.g.value(v).item() as f64);
            let rec = PretrainRecord {
                step,
                total: s.g.value(total).item() as f64,
                num: val(parts.num),
                ce: val(parts.ce),
                mcat: val(parts.mcat),
                con: val(parts.con),
                emb: val(parts.emb),
                memb: val(parts.memb),
                lr,
            };
            if !rec.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("{rec:?}"),
                });
            }
            let mut g = s.g.backward(total)?;
            (rec, s.param_grads(&mut g))
        };
        opt.step(&mut model.store, &grads, lr)?;
        model.refresh_spectral(cfg.power_iters);
        on_step(&rec);
        curve.push(rec);
    }
    Ok(curve)
}
