//! Top-k selection of representative assets from an unbounded asset list.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One asset embedding with its metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Asset {
    pub vector: Vec<f32>,
    pub timestamp: f64,
    pub engagement: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "criterion")]
pub enum AssetCriterion {
    /// Most recent first.
    Recency,
    /// Highest engagement first.
    Engagement,
    /// `ceil(k/2)` nearest to the centroid, then `floor(k/2)` farthest.
    CentroidOutlier,
    Random { seed: u64 },
}

impl Default for AssetCriterion {
    fn default() -> Self {
        AssetCriterion::Recency
    }
}

fn lex(a: &[f32], b: &[f32]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn dist2(a: &[f32], c: &[f64]) -> f64 {
    a.iter().zip(c).map(|(&x, &m)| (x as f64 - m).powi(2)).sum()
}

/// Selects at most `k` assets. Ties on the criterion score are broken by
/// lexicographic vector order and then input position, so the result does
/// not depend on the input order unless two assets are identical.
pub fn select_top_k_assets(assets: &[Asset], k: usize, criterion: AssetCriterion) -> Vec<Asset> {
    let k = k.max(1);
    if assets.len() <= k {
        return assets.to_vec();
    }
    let mut order: Vec<usize> = (0..assets.len()).collect();
    let tie = |i: &usize, j: &usize| lex(&assets[*i].vector, &assets[*j].vector).then(i.cmp(j));
    match criterion {
        AssetCriterion::Recency => {
            order.sort_by(|i, j| {
                assets[*j]
                    .timestamp
                    .total_cmp(&assets[*i].timestamp)
                    .then_with(|| tie(i, j))
            });
            order.truncate(k);
        }
        AssetCriterion::Engagement => {
            order.sort_by(|i, j| {
                assets[*j]
                    .engagement
                    .total_cmp(&assets[*i].engagement)
                    .then_with(|| tie(i, j))
            });
            order.truncate(k);
        }
        AssetCriterion::CentroidOutlier => {
            let dim = assets[0].vector.len();
            let mut centroid = vec![0.0f64; dim];
            for a in assets {
                for (c, &x) in centroid.iter_mut().zip(&a.vector) {
                    *c += x as f64;
                }
            }
            centroid.iter_mut().for_each(|c| *c /= assets.len() as f64);
            let d: Vec<f64> = assets.iter().map(|a| dist2(&a.vector, &centroid)).collect();
            order.sort_by(|i, j| d[*i].total_cmp(&d[*j]).then_with(|| tie(i, j)));
            let near = k.div_ceil(2);
            let far = k / 2;
            let mut picked: Vec<usize> = order[..near].to_vec();
            picked.extend(order[order.len() - far..].iter().rev());
            order = picked;
        }
        AssetCriterion::Random { seed } => {
            order.sort_by(tie);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            order.truncate(k);
        }
    }
    order.into_iter().map(|i| assets[i].clone()).collect()
}
