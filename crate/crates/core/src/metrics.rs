use serde::{Deserialize, Serialize};

/// Per-class and class-averaged accuracy with a confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    /// `None` for classes without labeled samples.
    pub per_class: Vec<Option<f64>>,
    /// Mean of the defined per-class accuracies; `None` when no sample is labeled.
    pub class_mean: Option<f64>,
    pub overall: Option<f64>,
}

pub fn classification_report(truth: &[Option<usize>], predicted: &[usize], n_classes: usize) -> ClassificationReport {
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (t, &p) in truth.iter().zip(predicted) {
        if let Some(t) = *t {
            confusion[t][p] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let class_mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let labeled: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let overall = (labeled > 0).then(|| correct as f64 / labeled as f64);
    ClassificationReport {
        confusion,
        per_class,
        class_mean,
        overall,
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |k: u64| (k * k.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&k| pairs(k)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(n as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_counts() {
        let truth = [Some(0), Some(0), Some(1), None, Some(1)];
        let pred = [0, 1, 1, 0, 1];
        let r = classification_report(&truth, &pred, 3);
        assert_eq!(r.confusion[0], vec![1, 1, 0]);
        assert_eq!(r.per_class, vec![Some(0.5), Some(1.0), None]);
        assert_eq!(r.class_mean, Some(0.75));
        assert_eq!(r.overall, Some(0.75));
        let none = classification_report(&[None, None], &[0, 1], 2);
        assert_eq!(none.class_mean, None);
    }

    #[test]
    fn ari_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        // Hand-computed: contingency [[1,1],[1,1]] gives index 0, expected 2/3.
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!((v - (-0.5)).abs() < 1e-12);
    }
}
