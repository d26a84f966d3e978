use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::HarnessError;

/// Splits row indices into `k` disjoint folds stratified on the label.
///
/// Each class is shuffled and dealt round-robin; the dealing position carries
/// over from one class to the next so fold sizes differ by at most one.
/// Indices inside a fold are sorted.
pub fn stratified_kfold(
    labels: &[u8],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, HarnessError> {
    if k < 2 {
        return Err(HarnessError::Config(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[usize::from(y == 1)].push(i);
    }
    for (class, rows) in by_class.iter().enumerate() {
        if rows.len() < k {
            return Err(HarnessError::Stratify {
                class: class as u8,
                found: rows.len(),
                folds: k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::with_capacity(labels.len() / k + 1); k];
    let mut slot = 0;
    for rows in by_class.iter_mut() {
        rows.shuffle(&mut rng);
        for &i in rows.iter() {
            folds[slot].push(i);
            slot = (slot + 1) % k;
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Complement of fold `f`, sorted.
pub fn train_indices(folds: &[Vec<usize>], f: usize) -> Vec<usize> {
    let mut out: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != f)
        .flat_map(|(_, rows)| rows.iter().copied())
        .collect();
    out.sort_unstable();
    out
}

/// Stratified subsample of at most `cap` rows, keeping class proportions up
/// to rounding. Returns sorted indices; all rows when `cap >= labels.len()`.
pub fn stratified_subsample(labels: &[u8], cap: usize, seed: u64) -> Vec<usize> {
    let n = labels.len();
    if cap >= n {
        return (0..n).collect();
    }
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| labels[i] != 1).collect();
    let take_pos = ((pos.len() as f64) * cap as f64 / n as f64).round() as usize;
    let take_pos = take_pos.min(pos.len()).min(cap);
    let take_neg = (cap - take_pos).min(neg.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut out: Vec<usize> = pos[..take_pos]
        .iter()
        .chain(&neg[..take_neg])
        .copied()
        .collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_division() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i < 40)).collect();
        let folds = stratified_kfold(&labels, 10, 1).unwrap();
        for f in &folds {
            assert_eq!(f.len(), 10);
            assert_eq!(f.iter().filter(|&&i| labels[i] == 1).count(), 4);
        }
    }

    #[test]
    fn small_class_is_an_error() {
        let labels: Vec<u8> = (0..10).map(|i| u8::from(i < 3)).collect();
        assert!(matches!(
            stratified_kfold(&labels, 10, 0),
            Err(HarnessError::Stratify { .. })
        ));
        let labels: Vec<u8> = (0..20).map(|i| u8::from(i < 3)).collect();
        assert!(matches!(
            stratified_kfold(&labels, 10, 0),
            Err(HarnessError::Stratify {
                class: 1,
                found: 3,
                folds: 10
            })
        ));
        assert!(stratified_kfold(&labels, 1, 0).is_err());
    }

    #[test]
    fn partition_and_determinism() {
        let labels: Vec<u8> = (0..57).map(|i| u8::from(i % 3 == 0)).collect();
        let a = stratified_kfold(&labels, 5, 9).unwrap();
        assert_eq!(a, stratified_kfold(&labels, 5, 9).unwrap());
        let mut all: Vec<usize> = a.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..57).collect::<Vec<_>>());
        let t = train_indices(&a, 2);
        assert_eq!(t.len() + a[2].len(), 57);
        assert!(t.iter().all(|i| a[2].binary_search(i).is_err()));
    }

    #[test]
    fn subsample_keeps_proportions() {
        let labels: Vec<u8> = (0..1000).map(|i| u8::from(i % 4 == 0)).collect();
        let s = stratified_subsample(&labels, 200, 3);
        assert_eq!(s.len(), 200);
        assert_eq!(s.iter().filter(|&&i| labels[i] == 1).count(), 50);
        assert_eq!(stratified_subsample(&labels, 5000, 3).len(), 1000);
    }
}
