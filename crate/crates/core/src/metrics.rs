//! Ranking and calibration metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub auroc: f64,
    pub auprc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// AUROC (Mann-Whitney U with ties as one half) and step-wise AUPRC from a
/// single descending sort of `scores`.
pub fn ranking_metrics(scores: &[f64], labels: &[bool]) -> Result<Ranking> {
    if scores.len() != labels.len() {
        return Err(Error::shape("ranking_metrics", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(format!(
            "ranking metrics need both classes (positives={n_pos}, negatives={n_neg})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Walk tie groups from the highest score down. `u2` counts, in half
    // units, (positive, negative) pairs ranked correctly.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut u2: u128 = 0;
    let mut ap = 0.0f64;
    // the same sum as a reduced fraction while it fits, for a correctly
    // rounded result on small inputs
    let mut exact: Option<(u128, u128)> = Some((0, 1));
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gp, mut gn) = (0usize, 0usize);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // positives in this group beat every negative below it and tie with gn
        let neg_below = n_neg - fp - gn;
        u2 += gp as u128 * (2 * neg_below + gn) as u128;
        tp += gp;
        fp += gn;
        if gp > 0 {
            ap += gp as f64 * (tp as f64 / (tp + fp) as f64);
            exact = exact.and_then(|(num, den)| add_fraction(num, den, (gp * tp) as u128, (tp + fp) as u128));
        }
    }
    let auroc = u2 as f64 / (2 * n_pos as u128 * n_neg as u128) as f64;
    const EXACT: u128 = 1 << f64::MANTISSA_DIGITS;
    let auprc = match exact.and_then(|(num, den)| Some((num, den.checked_mul(n_pos as u128)?))) {
        Some((num, den)) if num < EXACT && den < EXACT => num as f64 / den as f64,
        _ => ap / n_pos as f64,
    };
    Ok(Ranking {
        auroc,
        auprc,
        n_pos,
        n_neg,
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `num/den + a/b` reduced, or `None` on overflow.
fn add_fraction(num: u128, den: u128, a: u128, b: u128) -> Option<(u128, u128)> {
    let g = gcd(den, b);
    let l = den.checked_mul(b / g)?;
    let n = num.checked_mul(l / den)?.checked_add(a.checked_mul(l / b)?)?;
    let r = gcd(n, l).max(1);
    Some((n / r, l / r))
}

pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    ranking_metrics(scores, labels).map(|r| r.auroc)
}

pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if !labels.iter().any(|&l| l) {
        return Err(Error::Invalid("auprc needs at least one positive".into()));
    }
    if labels.iter().all(|&l| l) {
        return Ok(1.0);
    }
    ranking_metrics(scores, labels).map(|r| r.auprc)
}

/// Expected calibration error over `bins` equal-width confidence bins.
/// Confidence is the top class probability; a row is correct when its
/// argmax equals the label.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Invalid("ece needs at least one bin".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::shape("ece", &[probs.len()], &[labels.len()]));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut cnt = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    let mut acc = vec![0.0f64; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let (arg, c) = p
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        let b = ((c * bins as f64) as usize).min(bins - 1);
        cnt[b] += 1;
        conf[b] += c;
        acc[b] += f64::from(u8::from(arg == y));
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| cnt[b] > 0)
        .map(|b| {
            let k = cnt[b] as f64;
            (k / n) * (acc[b] / k - conf[b] / k).abs()
        })
        .sum())
}

/// Task-level summary: positive-class ranking for binary tasks, macro
/// one-vs-rest for more classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub ece: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn task_metrics(probs: &[Vec<f64>], labels: &[usize], classes: usize, ece_bins: usize) -> Result<TaskMetrics> {
    let e = ece(probs, labels, ece_bins)?;
    if classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let lab: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        let r = ranking_metrics(&scores, &lab)?;
        return Ok(TaskMetrics {
            auroc: r.auroc,
            auprc: r.auprc,
            ece: e,
            n_pos: r.n_pos,
            n_neg: r.n_neg,
        });
    }
    let (mut a, mut p, mut k) = (0.0, 0.0, 0usize);
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let lab: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        if let Ok(r) = ranking_metrics(&scores, &lab) {
            a += r.auroc;
            p += r.auprc;
            k += 1;
        }
    }
    if k == 0 {
        return Err(Error::Invalid("no class has both positives and negatives".into()));
    }
    Ok(TaskMetrics {
        auroc: a / k as f64,
        auprc: p / k as f64,
        ece: e,
        n_pos: labels.len(),
        n_neg: 0,
    })
}

/// Mean and (population) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Mean silhouette coefficient of labelled points under Euclidean distance.
/// Points in singleton clusters score 0.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::shape("silhouette", &[points.len()], &[labels.len()]));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if labels.iter().collect::<std::collections::HashSet<_>>().len() < 2 {
        return Err(Error::Invalid("silhouette needs at least two clusters".into()));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sum[labels[j]] += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                cnt[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if cnt[own] == 0 {
            continue;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && cnt[c] > 0)
            .map(|c| sum[c] / cnt[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / points.len() as f64)
}
