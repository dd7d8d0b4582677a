//! Cross-validation folds and holdout splits.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Index sets of one train/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Rows grouped by label (unlabelled rows last), each group shuffled.
fn strata(labels: &[Option<usize>], rng: &mut Rng) -> Vec<usize> {
    let classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes + 1];
    for (i, l) in labels.iter().enumerate() {
        groups[l.unwrap_or(classes)].push(i);
    }
    let mut out = Vec::with_capacity(labels.len());
    for mut g in groups {
        g.shuffle(rng);
        out.extend(g);
    }
    out
}

/// Stratified k-fold: class proportions in each test fold match the whole
/// within one example per class.
pub fn make_folds(labels: &[Option<usize>], k: usize, rng: &mut Rng) -> Result<Vec<DatasetSplit>> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be >= 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::Invalid(format!("{} examples cannot fill {k} folds", labels.len())));
    }
    let mut fold_of = vec![0usize; labels.len()];
    for (pos, i) in strata(labels, rng).into_iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| fold_of[i] == f);
            DatasetSplit { train, test }
        })
        .collect())
}

/// Stratified holdout of roughly `frac` of `idx` for validation.
pub fn train_val_split(idx: &[usize], labels: &[Option<usize>], frac: f64, rng: &mut Rng) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::Config(format!("validation fraction must be in [0, 1), got {frac}")));
    }
    let sub: Vec<Option<usize>> = idx.iter().map(|&i| labels[i]).collect();
    let order = strata(&sub, rng);
    let every = if frac > 0.0 { (1.0 / frac).round().max(1.0) as usize } else { usize::MAX };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (pos, j) in order.into_iter().enumerate() {
        if frac > 0.0 && pos % every == every - 1 {
            test.push(idx[j]);
        } else {
            train.push(idx[j]);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit { train, test })
}

/// Earliest `1 - frac` of rows by timestamp train, the rest test. Rows
/// without a timestamp sort first.
pub fn chrono_split(timestamps: &[Option<f64>], frac: f64) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::Config(format!("test fraction must be in [0, 1], got {frac}")));
    }
    let mut order: Vec<usize> = (0..timestamps.len()).collect();
    order.sort_by(|&a, &b| {
        let ta = timestamps[a].unwrap_or(f64::NEG_INFINITY);
        let tb = timestamps[b].unwrap_or(f64::NEG_INFINITY);
        ta.total_cmp(&tb).then(a.cmp(&b))
    });
    let n_test = (timestamps.len() as f64 * frac).round() as usize;
    let test = order.split_off(timestamps.len() - n_test);
    Ok(DatasetSplit { train: order, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn folds_partition_and_stratify() {
        let labels: Vec<Option<usize>> = (0..103).map(|i| Some(usize::from(i % 4 == 0))).collect();
        let folds = make_folds(&labels, 5, &mut substream(1, "data")).unwrap();
        let mut seen = vec![0; labels.len()];
        let pos_total = labels.iter().filter(|l| **l == Some(1)).count() as f64;
        for f in &folds {
            assert_eq!(f.train.len() + f.test.len(), labels.len());
            for &i in &f.test {
                seen[i] += 1;
            }
            let pos = f.test.iter().filter(|&&i| labels[i] == Some(1)).count() as f64;
            assert!((pos - pos_total / 5.0).abs() <= 1.0);
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn too_few_rows_is_an_error() {
        assert!(make_folds(&[Some(0), Some(1)], 5, &mut substream(1, "data")).is_err());
    }

    #[test]
    fn chrono_split_respects_time() {
        let ts = vec![Some(5.0), Some(1.0), None, Some(3.0)];
        let s = chrono_split(&ts, 0.5).unwrap();
        assert_eq!(s.train, vec![2, 1]);
        assert_eq!(s.test, vec![3, 0]);
    }

    #[test]
    fn val_split_fraction() {
        let labels: Vec<Option<usize>> = (0..100).map(|i| Some(i % 2)).collect();
        let idx: Vec<usize> = (0..100).collect();
        let s = train_val_split(&idx, &labels, 0.2, &mut substream(3, "data")).unwrap();
        assert_eq!(s.test.len(), 20);
        assert_eq!(s.train.len(), 80);
    }
}
