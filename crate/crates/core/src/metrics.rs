//! Corpus BLEU (whitespace tokens, no smoothing) and word error rate.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum ScoreDetail {
    Bleu {
        /// Clipped matches and totals per n-gram order 1..=4.
        matches: [usize; MAX_ORDER],
        totals: [usize; MAX_ORDER],
        hyp_len: usize,
        ref_len: usize,
    },
    Wer {
        edits: usize,
        ref_words: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    /// `bleu` or `wer`.
    pub metric: String,
    pub value: f64,
    pub n_sentences: usize,
    pub detail: ScoreDetail,
}

impl ScoreReport {
    pub fn precisions(&self) -> Option<[f64; MAX_ORDER]> {
        match &self.detail {
            ScoreDetail::Bleu { matches, totals, .. } => Some(std::array::from_fn(|n| {
                if totals[n] == 0 {
                    0.0
                } else {
                    matches[n] as f64 / totals[n] as f64
                }
            })),
            ScoreDetail::Wer { .. } => None,
        }
    }

    pub fn brevity_penalty(&self) -> Option<f64> {
        match &self.detail {
            ScoreDetail::Bleu { hyp_len, ref_len, .. } => Some(brevity_penalty(*hyp_len, *ref_len)),
            ScoreDetail::Wer { .. } => None,
        }
    }

    /// Recomputes the value from the stored counts.
    pub fn recompute(&self) -> f64 {
        match &self.detail {
            ScoreDetail::Bleu {
                matches,
                totals,
                hyp_len,
                ref_len,
            } => bleu_from_counts(matches, totals, *hyp_len, *ref_len),
            ScoreDetail::Wer { edits, ref_words } => *edits as f64 / *ref_words as f64,
        }
    }

    fn detail_string(&self) -> String {
        match &self.detail {
            ScoreDetail::Bleu {
                matches,
                totals,
                hyp_len,
                ref_len,
            } => {
                let p: Vec<String> = matches.iter().zip(totals).map(|(m, t)| format!("{m}/{t}")).collect();
                format!(
                    "p={} bp={:.4} hyp_len={hyp_len} ref_len={ref_len} n={}",
                    p.join(" "),
                    brevity_penalty(*hyp_len, *ref_len),
                    self.n_sentences
                )
            }
            ScoreDetail::Wer { edits, ref_words } => format!("edits={edits} ref_words={ref_words} n={}", self.n_sentences),
        }
    }
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    }
}

fn bleu_from_counts(matches: &[usize; MAX_ORDER], totals: &[usize; MAX_ORDER], c: usize, r: usize) -> f64 {
    if matches.iter().zip(totals).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_p: f64 = matches
        .iter()
        .zip(totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / MAX_ORDER as f64;
    100.0 * brevity_penalty(c, r) * log_p.exp()
}

fn check_lengths<H: AsRef<str>, R: AsRef<str>>(op: &'static str, hyps: &[H], refs: &[R]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(op, format!("{} hypotheses vs {} references", hyps.len(), refs.len())));
    }
    Ok(())
}

fn ngram_counts<'a, 'b>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with clipped 1..4-gram precisions and a brevity
/// penalty; zero whenever any precision is zero.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<ScoreReport> {
    check_lengths("corpus_bleu", hyps, refs)?;
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rf: Vec<&str> = rf.as_ref().split_whitespace().collect();
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&rf, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    Ok(ScoreReport {
        metric: "bleu".into(),
        value: bleu_from_counts(&matches, &totals, c, r),
        n_sentences: hyps.len(),
        detail: ScoreDetail::Bleu {
            matches,
            totals,
            hyp_len: c,
            ref_len: r,
        },
    })
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Total word edit distance over total reference words.
pub fn wer<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<ScoreReport> {
    check_lengths("wer", hyps, refs)?;
    let mut edits = 0;
    let mut ref_words = 0;
    for (h, rf) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rf: Vec<&str> = rf.as_ref().split_whitespace().collect();
        edits += edit_distance(&h, &rf);
        ref_words += rf.len();
    }
    if ref_words == 0 {
        return Err(Error::invalid("wer", "empty reference corpus"));
    }
    Ok(ScoreReport {
        metric: "wer".into(),
        value: edits as f64 / ref_words as f64,
        n_sentences: hyps.len(),
        detail: ScoreDetail::Wer { edits, ref_words },
    })
}

/// CSV text `metric,value,detail`, one row per report in the given order.
pub fn report_csv(reports: &[ScoreReport]) -> String {
    let mut s = String::from("metric,value,detail\n");
    for r in reports {
        let _ = writeln!(s, "{},{:.4},{}", r.metric, r.value, r.detail_string());
    }
    s
}

pub fn emit_report(reports: &[ScoreReport], path: &Path) -> Result<()> {
    std::fs::write(path, report_csv(reports)).map_err(|e| Error::io(path, e))
}

/// Reads a plain-text corpus, one sentence per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn identical_corpora_score_100() {
        let refs = ["a b c d e", "x y z w"];
        assert!((corpus_bleu(&refs, &refs).unwrap().value - 100.0).abs() < 1e-9);
    }

    #[test]
    fn short_hypothesis_hand_example() {
        let r = corpus_bleu(&["a b c d"], &["a b c d e f"]).unwrap();
        assert_eq!(r.precisions().unwrap(), [1.0; 4]);
        assert!((r.brevity_penalty().unwrap() - (-0.5f64).exp()).abs() < 1e-12);
        assert!((r.value - 60.653).abs() < 0.01, "{}", r.value);
    }

    #[test]
    fn disjoint_is_zero_and_lengths_checked() {
        assert_eq!(corpus_bleu(&["a b c d"], &["e f g h"]).unwrap().value, 0.0);
        assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
        assert!(wer(&["a"], &[] as &[&str]).is_err());
    }

    #[test]
    fn clipping_limits_repeated_ngrams() {
        let r = corpus_bleu(&["the the the the"], &["the cat"]).unwrap();
        let ScoreDetail::Bleu { matches, .. } = r.detail else { panic!() };
        assert_eq!(matches[0], 1);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a b c"], &["a b c"]).unwrap().value, 0.0);
        assert_eq!(wer(&["a x c"], &["a b c d"]).unwrap().value, 0.5);
        assert_eq!(wer(&[""], &["a b c"]).unwrap().value, 1.0);
        assert!(wer(&[""], &[""]).is_err());
    }

    fn brute(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute(ra, rb) + usize::from(x != y);
                sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
            }
        }
    }

    #[test]
    fn edit_distance_matches_recursion_exhaustively() {
        // Every pair of sequences over {a, b} of length <= 4, plus a larger
        // alphabet sample up to length 6 in the property test below.
        let mut seqs = vec![vec![]];
        for len in 1..=4 {
            for code in 0..(1 << len) {
                seqs.push((0..len).map(|i| (code >> i) as u8 & 1).collect::<Vec<u8>>());
            }
        }
        for a in &seqs {
            for b in &seqs {
                assert_eq!(edit_distance(a, b), brute(a, b));
            }
        }
    }

    proptest! {
        #[test]
        fn edit_distance_oracle(a in prop::collection::vec(0u8..4, 0..=6), b in prop::collection::vec(0u8..4, 0..=6)) {
            prop_assert_eq!(edit_distance(&a, &b), brute(&a, &b));
        }

        #[test]
        fn bleu_is_order_invariant_and_recomputable(
            pairs in prop::collection::vec((prop::collection::vec(0u8..5, 1..8), prop::collection::vec(0u8..5, 1..8)), 1..6),
            rot in 0usize..6,
        ) {
            let show = |v: &Vec<u8>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
            let hyps: Vec<String> = pairs.iter().map(|p| show(&p.0)).collect();
            let refs: Vec<String> = pairs.iter().map(|p| show(&p.1)).collect();
            let a = corpus_bleu(&hyps, &refs).unwrap();
            let k = rot % pairs.len();
            let mut h2 = hyps.clone();
            let mut r2 = refs.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            let b = corpus_bleu(&h2, &r2).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-9);
            prop_assert!((a.recompute() - a.value).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&a.value));
        }

        #[test]
        fn matching_pair_never_hurts_without_brevity_penalty(
            pairs in prop::collection::vec((prop::collection::vec(0u8..4, 4..8), prop::collection::vec(0u8..4, 4..8)), 1..5),
            extra in prop::collection::vec(0u8..4, 4..8),
        ) {
            let show = |v: &Vec<u8>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
            let mut hyps: Vec<String> = pairs.iter().map(|p| show(&p.0)).collect();
            let mut refs: Vec<String> = pairs.iter().map(|p| show(&p.1)).collect();
            let before = corpus_bleu(&hyps, &refs).unwrap();
            hyps.push(show(&extra));
            refs.push(show(&extra));
            let after = corpus_bleu(&hyps, &refs).unwrap();
            if before.brevity_penalty() == Some(1.0) && after.brevity_penalty() == Some(1.0) {
                prop_assert!(after.value >= before.value - 1e-9);
            }
        }
    }

    #[test]
    fn csv_is_stable() {
        let b = corpus_bleu(&["a b c d"], &["a b c d e f"]).unwrap();
        let w = wer(&["a x c"], &["a b c d"]).unwrap();
        let csv = report_csv(&[b.clone(), w]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,value,detail");
        assert!(lines[1].starts_with("bleu,60.6531,"));
        assert!(lines[2].starts_with("wer,0.5000,"));
        assert_eq!(csv, report_csv(&[b, wer(&["a x c"], &["a b c d"]).unwrap()]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        emit_report(&[corpus_bleu(&["a"], &["a"]).unwrap()], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
    }
}
