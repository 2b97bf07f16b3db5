//! Corpus BLEU, shift-free TER and token accuracy.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 in `[0, 1]`.
///
/// Clipped n-gram matches and totals are summed over the corpus. For orders
/// two to four a zero match count is smoothed to `1 / (total + 1)`; a zero
/// unigram precision gives 0. The brevity penalty is `exp(1 - r / c)` when
/// the hypotheses are shorter than the references.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_corpus(hypotheses, references)?;
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (gram, count) in ngram_counts(h, n) {
                matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_precision = 0.0;
    for n in 0..MAX_ORDER {
        let p = if n > 0 && matches[n] == 0 {
            1.0 / (totals[n] + 1) as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_precision += p.ln() / MAX_ORDER as f64;
    }
    let brevity = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(brevity * log_precision.exp())
}

/// Word-level Levenshtein distance with unit substitution, insertion and
/// deletion costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

/// Edit distance divided by reference length; no block shifts.
pub fn ter_noshift<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("ter reference"));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Total edits over total reference length.
pub fn corpus_ter<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_corpus(hypotheses, references)?;
    let mut edits = 0;
    let mut len = 0;
    for (h, r) in hypotheses.iter().zip(references) {
        if r.is_empty() {
            return Err(Error::Empty("ter reference"));
        }
        edits += edit_distance(h, r);
        len += r.len();
    }
    Ok(edits as f64 / len as f64)
}

/// Position-wise matches over the summed `max(len(h), len(r))`.
pub fn token_accuracy<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_corpus(hypotheses, references)?;
    let mut hits = 0;
    let mut total = 0;
    for (h, r) in hypotheses.iter().zip(references) {
        hits += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    if total == 0 {
        return Err(Error::Empty("token accuracy corpus"));
    }
    Ok(hits as f64 / total as f64)
}

fn check_corpus<T>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<()> {
    if references.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Shape {
            op: "corpus",
            lhs: vec![hypotheses.len()],
            rhs: vec![references.len()],
        });
    }
    Ok(())
}
