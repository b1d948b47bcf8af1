//! Sequence-level evaluation metrics.

use crate::error::{config_err, Result};

/// Fraction of predictions identical to their targets.
pub fn exact_match<T: PartialEq>(preds: &[Vec<T>], targets: &[Vec<T>]) -> Result<f64> {
    check_counts(preds, targets)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of target positions where the prediction agrees (position-wise).
pub fn token_accuracy<T: PartialEq>(preds: &[Vec<T>], targets: &[Vec<T>]) -> Result<f64> {
    check_counts(preds, targets)?;
    let total: usize = targets.iter().map(Vec::len).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let hits: usize = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| p.iter().zip(t).filter(|(a, b)| a == b).count())
        .sum();
    Ok(hits as f64 / total as f64)
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean over pairs of `levenshtein(pred, target) / len(target)`.
pub fn edit_distance<T: PartialEq>(preds: &[Vec<T>], targets: &[Vec<T>]) -> Result<f64> {
    check_counts(preds, targets)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| levenshtein(p, t) as f64 / t.len().max(1) as f64)
        .sum();
    Ok(sum / preds.len() as f64)
}

/// Total edits over total target length.
pub fn corpus_edit_distance<T: PartialEq>(preds: &[Vec<T>], targets: &[Vec<T>]) -> Result<f64> {
    check_counts(preds, targets)?;
    let total: usize = targets.iter().map(Vec::len).sum();
    let edits: usize = preds.iter().zip(targets).map(|(p, t)| levenshtein(p, t)).sum();
    Ok(edits as f64 / total.max(1) as f64)
}

fn check_counts<T>(preds: &[Vec<T>], targets: &[Vec<T>]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(config_err(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> Vec<char> {
        x.chars().collect()
    }

    #[test]
    fn identical_sets() {
        let t = vec![s("abc"), s("de")];
        assert_eq!(exact_match(&t, &t).unwrap(), 1.0);
        assert_eq!(edit_distance(&t, &t).unwrap(), 0.0);
        assert_eq!(token_accuracy(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn single_substitution() {
        let d = edit_distance(&[s("abc")], &[s("abd")]).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(exact_match(&[s("abc")], &[s("abd")]).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_symbols() {
        assert_eq!(edit_distance(&[s("abcd")], &[s("wxyz")]).unwrap(), 1.0);
    }

    #[test]
    fn levenshtein_against_known_values() {
        assert_eq!(levenshtein(&s("kitten"), &s("sitting")), 3);
        assert_eq!(levenshtein(&s(""), &s("abc")), 3);
        assert_eq!(levenshtein(&s("flaw"), &s("lawn")), 2);
    }

    #[test]
    fn mean_and_corpus_forms_differ_by_weighting() {
        let preds = vec![s("ab"), s("abcdefgh")];
        let targets = vec![s("xb"), s("abcdefgh")];
        assert!((edit_distance(&preds, &targets).unwrap() - 0.25).abs() < 1e-15);
        assert!((corpus_edit_distance(&preds, &targets).unwrap() - 0.1).abs() < 1e-15);
        assert!(exact_match(&preds, &targets[..1]).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn seq() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..4, 0..12)
    }

    proptest! {
        #[test]
        fn levenshtein_is_a_metric(a in seq(), b in seq(), c in seq()) {
            let d = levenshtein(&a, &b);
            prop_assert_eq!(d, levenshtein(&b, &a));
            prop_assert_eq!(d == 0, a == b);
            prop_assert!(d >= a.len().abs_diff(b.len()) && d <= a.len().max(b.len()));
            prop_assert!(levenshtein(&a, &c) <= d + levenshtein(&b, &c));
        }

        #[test]
        fn scores_stay_in_range(pairs in prop::collection::vec((seq(), prop::collection::vec(0u8..4, 1..12)), 1..6)) {
            let (preds, targets): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let em = exact_match(&preds, &targets).unwrap();
            let acc = token_accuracy(&preds, &targets).unwrap();
            prop_assert!((0.0..=1.0).contains(&em) && (0.0..=1.0).contains(&acc));
            prop_assert!(edit_distance(&preds, &targets).unwrap() >= 0.0);
            prop_assert!(corpus_edit_distance(&preds, &targets).unwrap() >= 0.0);
        }
    }
}
