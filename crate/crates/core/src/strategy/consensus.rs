//! Self-consistency selection by assertion overlap.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("consensus needs at least one candidate")]
pub struct ConsensusError;

const ASSERTION_KEYWORDS: [&str; 4] = ["assert", "self.assert", "with pytest.raises", "pytest.raises"];

/// Whitespace-collapsed lines that start with an assertion keyword.
pub fn assertion_set(script: &str) -> BTreeSet<String> {
    script
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|l| ASSERTION_KEYWORDS.iter().any(|k| l.starts_with(k)))
        .collect()
}

/// Jaccard similarity; two empty sets count as identical.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Picks the candidate with the highest mean pairwise Jaccard similarity to
/// the others. Ties go to the lowest index.
pub fn select_consensus<S: AsRef<str>>(candidates: &[S]) -> Result<(usize, &str), ConsensusError> {
    if candidates.is_empty() {
        return Err(ConsensusError);
    }
    if candidates.len() == 1 {
        return Ok((0, candidates[0].as_ref()));
    }
    let sets: Vec<_> = candidates.iter().map(|c| assertion_set(c.as_ref())).collect();
    let n = sets.len();
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 0..n {
        let total: f64 = (0..n).filter(|&j| j != i).map(|j| jaccard(&sets[i], &sets[j])).sum();
        let mean = total / (n - 1) as f64;
        if mean > best.1 {
            best = (i, mean);
        }
    }
    Ok((best.0, candidates[best.0].as_ref()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: &str = "assert f(1) == 1\nassert f(2) == 4";
    const B: &str = "assert f(0) == 0\nassert f(-1) == 1";

    #[test]
    fn identical_candidates_pick_first() {
        assert_eq!(select_consensus(&[A, A, A]).unwrap().0, 0);
    }

    #[test]
    fn majority_wins_over_disjoint_outlier() {
        // Means: A0 = (1 + 0) / 2, A1 = (1 + 0) / 2, B = (0 + 0) / 2.
        let (idx, src) = select_consensus(&[A, A, B]).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(src, A);
        let (idx, _) = select_consensus(&[B, A, A]).unwrap();
        assert_eq!(idx, 1);
    }

    #[test]
    fn single_candidate() {
        assert_eq!(select_consensus(&[B]).unwrap(), (0, B));
    }

    #[test]
    fn empty_is_error() {
        let none: [&str; 0] = [];
        assert_eq!(select_consensus(&none), Err(ConsensusError));
    }

    #[test]
    fn whitespace_is_collapsed() {
        let s = assertion_set("    assert  f(1)   ==  1\nx = 2\nself.assertEqual(a, b)");
        assert_eq!(
            s.into_iter().collect::<Vec<_>>(),
            vec!["assert f(1) == 1".to_string(), "self.assertEqual(a, b)".to_string()]
        );
    }

    #[test]
    fn partial_overlap() {
        let a = assertion_set("assert a\nassert b");
        let b = assertion_set("assert b\nassert c");
        assert!((jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }
}
