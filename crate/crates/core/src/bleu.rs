//! Corpus-level BLEU without smoothing.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{contract, Result};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and hypothesis n-gram totals for orders `1..=max_n`,
/// summed over the corpus, plus total hypothesis and reference lengths.
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn collect<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Self {
        let mut s = BleuStats {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: 0,
            ref_len: 0,
        };
        for (h, r) in hyps.iter().zip(refs) {
            s.hyp_len += h.len();
            s.ref_len += r.len();
            for n in 1..=max_n {
                let rc = ngram_counts(r, n);
                for (g, c) in ngram_counts(h, n) {
                    s.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                }
                s.totals[n - 1] += h.len().saturating_sub(n - 1);
            }
        }
        s
    }

    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let n = self.matches.len() as f64;
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp();
        bp * (log_sum / n).exp()
    }
}

/// Geometric mean of modified n-gram precisions (uniform weights) times the
/// brevity penalty `exp(min(0, 1 - ref_len / hyp_len))`, in `[0, 1]`.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(contract("BLEU needs at least one hypothesis"));
    }
    if hyps.len() != refs.len() {
        return Err(contract(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if max_n == 0 {
        return Err(contract("max_n must be at least 1"));
    }
    Ok(BleuStats::collect(hyps, refs, max_n).score())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn perfect_match() {
        let h = vec![toks("a b c d e"), toks("x y z w")];
        assert_eq!(corpus_bleu(&h, &h, 4).unwrap(), 1.0);
    }

    #[test]
    fn brevity_penalty_example() {
        let b = corpus_bleu(&[toks("a b c d")], &[toks("a b c d e")], 4).unwrap();
        assert!((b - (-0.25f64).exp()).abs() < 1e-12);
        assert!((b - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn no_shared_four_gram_is_zero() {
        let b = corpus_bleu(&[toks("a b c d e")], &[toks("a b c x d e")], 4).unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn clipping() {
        let s = BleuStats::collect(&[toks("the the the")], &[toks("the cat")], 1);
        assert_eq!(s.matches, vec![1]);
        assert_eq!(s.totals, vec![3]);
    }

    #[test]
    fn empty_set_is_error() {
        let empty: Vec<Vec<u8>> = Vec::new();
        assert!(corpus_bleu(&empty, &empty, 4).is_err());
    }
}
