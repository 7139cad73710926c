//! Classification metrics and fold splitting for the evaluation harness.

use crate::error::{Error, Result};
use crate::rng::Pcg32;
use crate::tensor::Tensor;

/// Fraction of rows whose argmax score matches the label. Ties resolve to the
/// lowest class index.
pub fn accuracy(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, cols) = matrix_shape(scores, labels.len())?;
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        if label >= cols {
            return Err(Error::Metric(format!(
                "label {label} out of range for {cols} score columns"
            )));
        }
        let row = scores.row(r);
        let mut best = 0usize;
        for c in 1..cols {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows as f64)
}

/// Area under the ROC curve for binary labels via the rank-sum formulation,
/// with tied scores sharing their average rank. O(n log n).
pub fn roc_auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() || scores.is_empty() {
        return Err(Error::Metric(
            "roc_auc_binary needs equal-length non-empty score and label slices".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("roc_auc_binary scores must be finite".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "roc_auc_binary needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// Macro-averaged one-vs-rest ROC AUC over the classes that have both a
/// positive and a negative example in `labels`. Errors if no class does
/// (for example when only one class is present).
pub fn macro_auc(scores: &Tensor, labels: &[usize], n_classes: usize) -> Result<f64> {
    let (_, cols) = matrix_shape(scores, labels.len())?;
    if n_classes > cols {
        return Err(Error::Metric(format!(
            "macro_auc over {n_classes} classes needs at least that many score columns, got {cols}"
        )));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for class in 0..n_classes {
        let positive: Vec<bool> = labels.iter().map(|&y| y == class).collect();
        let n_pos = positive.iter().filter(|&&p| p).count();
        if n_pos == 0 || n_pos == labels.len() {
            continue;
        }
        let class_scores: Vec<f64> = (0..labels.len()).map(|r| scores.at(r, class)).collect();
        total += roc_auc_binary(&class_scores, &positive)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Metric(
            "macro_auc: labels contain a single class, AUC is undefined".into(),
        ));
    }
    Ok(total / counted as f64)
}

/// Splits `0..n` into `k` cross-validation folds: a seeded shuffle followed by
/// contiguous blocks of size `n / k` or `n / k + 1`. Returns
/// `(train_indices, test_indices)` per fold.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Config(format!("folds must be at least 2, got {k}")));
    }
    if n < k {
        return Err(Error::Config(format!(
            "cannot split {n} rows into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Pcg32::keyed(seed, 0xF01D);
    rng.shuffle(&mut order);
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let len = base + usize::from(fold < extra);
        let test: Vec<usize> = order[start..start + len].to_vec();
        let train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + len..])
            .copied()
            .collect();
        folds.push((train, test));
        start += len;
    }
    Ok(folds)
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn matrix_shape(scores: &Tensor, n_rows: usize) -> Result<(usize, usize)> {
    if scores.rank() != 2 {
        return Err(Error::Metric("scores must be a matrix".into()));
    }
    let rows = scores.rows();
    let cols = scores.cols();
    if rows != n_rows || rows == 0 {
        return Err(Error::Metric(format!(
            "{} score rows for {} labels",
            rows, n_rows
        )));
    }
    Ok((rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(n^2) pairwise AUC with half credit for ties; the oracle the rank-sum
    /// implementation must match.
    fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if positive[i] && !positive[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_pairwise_oracle_including_ties() {
        let mut rng = Pcg32::new(7, 7);
        for trial in 0..40 {
            let n = 2 + (trial % 12) * 17;
            let mut scores = Vec::with_capacity(n);
            let mut positive = Vec::with_capacity(n);
            let mut n_pos = 0;
            for i in 0..n {
                scores.push((rng.next_below(7) as f64) / 3.0);
                let p = rng.next_f64() < 0.4 || (i == n - 1 && n_pos == 0);
                n_pos += usize::from(p);
                positive.push(p);
            }
            if n_pos == n {
                positive[0] = false;
            }
            let fast = roc_auc_binary(&scores, &positive).unwrap();
            let slow = pairwise_auc(&scores, &positive);
            assert!(
                (fast - slow).abs() < 1e-12,
                "trial {trial}: rank-sum {fast} vs pairwise {slow}"
            );
        }
    }

    #[test]
    fn auc_known_values() {
        let auc = roc_auc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((auc - 0.75).abs() < 1e-15);
        let perfect = roc_auc_binary(&[0.0, 1.0], &[false, true]).unwrap();
        assert!((perfect - 1.0).abs() < 1e-15);
        let reversed = roc_auc_binary(&[1.0, 0.0], &[false, true]).unwrap();
        assert!(reversed.abs() < 1e-15);
        let all_tied = roc_auc_binary(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap();
        assert!((all_tied - 0.5).abs() < 1e-15);
    }

    #[test]
    fn auc_rejects_degenerate_inputs() {
        assert!(roc_auc_binary(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_auc_binary(&[0.1, 0.2], &[false, false]).is_err());
        assert!(roc_auc_binary(&[], &[]).is_err());
        assert!(roc_auc_binary(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn macro_auc_averages_one_vs_rest() {
        let scores = Tensor::new(
            vec![
                0.7, 0.2, 0.1, //
                0.1, 0.8, 0.1, //
                0.2, 0.2, 0.6, //
                0.5, 0.3, 0.2,
            ],
            vec![4, 3],
        )
        .unwrap();
        let labels = [0, 1, 2, 0];
        let auc = macro_auc(&scores, &labels, 3).unwrap();
        let c0 = roc_auc_binary(&[0.7, 0.1, 0.2, 0.5], &[true, false, false, true]).unwrap();
        let c1 = roc_auc_binary(&[0.2, 0.8, 0.2, 0.3], &[false, true, false, false]).unwrap();
        let c2 = roc_auc_binary(&[0.1, 0.1, 0.6, 0.2], &[false, false, true, false]).unwrap();
        assert!((auc - (c0 + c1 + c2) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn macro_auc_skips_absent_classes_and_rejects_single_class() {
        let scores = Tensor::new(vec![0.9, 0.1, 0.2, 0.8, 0.4, 0.6], vec![3, 2]).unwrap();
        let only_class_one_present = macro_auc(&scores, &[1, 1, 1], 2);
        assert!(only_class_one_present.is_err());
        let both = macro_auc(&scores, &[0, 1, 1], 2).unwrap();
        assert!(both.is_finite());
    }

    #[test]
    fn accuracy_counts_argmax_matches() {
        let scores = Tensor::new(vec![0.9, 0.1, 0.3, 0.7, 0.5, 0.5], vec![3, 2]).unwrap();
        let acc = accuracy(&scores, &[0, 1, 1]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&scores, &[0, 1, 2]).is_err());
    }

    #[test]
    fn kfold_covers_every_index_exactly_once() {
        for (n, k) in [(10, 5), (11, 3), (7, 7), (100, 6)] {
            let folds = kfold_split(n, k, 3).unwrap();
            assert_eq!(folds.len(), k);
            let mut seen = vec![0usize; n];
            for (train, test) in &folds {
                assert_eq!(train.len() + test.len(), n);
                assert!(test.len() == n / k || test.len() == n / k + 1);
                for &i in test {
                    seen[i] += 1;
                }
                let mut overlap = train.clone();
                overlap.retain(|i| test.contains(i));
                assert!(overlap.is_empty());
            }
            assert!(seen.iter().all(|&c| c == 1), "n={n} k={k}");
        }
    }

    #[test]
    fn kfold_is_seeded_and_rejects_bad_shapes() {
        assert_eq!(kfold_split(20, 4, 9).unwrap(), kfold_split(20, 4, 9).unwrap());
        assert_ne!(kfold_split(20, 4, 9).unwrap(), kfold_split(20, 4, 10).unwrap());
        assert!(matches!(kfold_split(3, 5, 0), Err(Error::Config(_))));
        assert!(matches!(kfold_split(10, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn std_and_mean_behave() {
        assert_eq!(sample_std(&[1.0]), 0.0);
        let s = sample_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert!((mean(&[1.0, 2.0, 3.0]) - 2.0).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn auc_rank_sum_equals_pairwise(
            raw in proptest::collection::vec((0u8..12, proptest::bool::ANY), 2..200)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 4.0).collect();
            let mut positive: Vec<bool> = raw.iter().map(|(_, p)| *p).collect();
            let n_pos = positive.iter().filter(|&&p| p).count();
            if n_pos == 0 { positive[0] = true; }
            if n_pos == positive.len() { positive[0] = false; }
            let fast = roc_auc_binary(&scores, &positive).unwrap();
            let slow = pairwise_auc(&scores, &positive);
            prop_assert!((fast - slow).abs() < 1e-12);
        }
    }
}
