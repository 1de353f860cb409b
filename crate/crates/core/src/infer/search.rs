use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Next-token log-probabilities for a set of prefixes.
pub trait StepScorer {
    fn eos(&self) -> usize;

    /// `rows[i]` names the source that `prefixes[i]` continues. Returns one
    /// log-probability vector per prefix; `-inf` marks forbidden tokens.
    fn log_probs(&mut self, rows: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Leading tag first, `[eos]` excluded.
    pub tokens: Vec<usize>,
    /// Sum of natural-log token probabilities, `[eos]` included.
    pub score: f64,
    /// `score / length^alpha` with length counting tokens after the tag
    /// plus `[eos]` when emitted.
    pub normalized: f64,
    pub finished_with_eos: bool,
}

fn argmax(lp: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in lp.iter().enumerate() {
        if x.is_finite() && best.is_none_or(|b| x > lp[b]) {
            best = Some(i);
        }
    }
    best
}

/// Step-synchronous greedy search over several sources at once. Ties go to
/// the lowest token id.
pub fn greedy_search<S: StepScorer>(scorer: &mut S, bos: &[usize], max_len: &[usize]) -> Result<Vec<Vec<usize>>> {
    let eos = scorer.eos();
    let mut out: Vec<Vec<usize>> = bos.iter().map(|&b| vec![b]).collect();
    let mut active: Vec<usize> = (0..bos.len()).filter(|&i| max_len[i] > 1).collect();
    while !active.is_empty() {
        let prefixes: Vec<Vec<usize>> = active.iter().map(|&i| out[i].clone()).collect();
        let lps = scorer.log_probs(&active, &prefixes)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, lp) in active.iter().zip(&lps) {
            match argmax(lp) {
                Some(t) if t != eos => {
                    out[i].push(t);
                    if out[i].len() < max_len[i] {
                        still.push(i);
                    }
                }
                _ => {}
            }
        }
        active = still;
    }
    Ok(out)
}

fn by_score_then_tokens(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(&b.1))
}

/// Beam search for one source (memory row 0). Each step expands every live
/// hypothesis, keeps the `beam` best candidates by total log-probability
/// (ties: lexicographically smaller token sequence), and retires those that
/// end in `[eos]`. Hypotheses reaching `max_len` tokens are retired as is.
/// Returns up to `beam` finished hypotheses, best normalized score first.
pub fn beam_search<S: StepScorer>(
    scorer: &mut S,
    bos: usize,
    max_len: usize,
    beam: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 || max_len == 0 {
        return Err(Error::invalid("beam_search", "beam and max_len must be >= 1"));
    }
    let eos = scorer.eos();
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut live: Vec<(f64, Vec<usize>)> = vec![(0.0, vec![bos])];
    let finish = |score: f64, tokens: Vec<usize>, with_eos: bool| {
        let len = (tokens.len() - 1 + usize::from(with_eos)).max(1) as f64;
        Hypothesis {
            normalized: score / len.powf(alpha),
            tokens,
            score,
            finished_with_eos: with_eos,
        }
    };
    while !live.is_empty() {
        if live[0].1.len() >= max_len {
            finished.extend(live.drain(..).map(|(s, t)| finish(s, t, false)));
            break;
        }
        let rows = vec![0; live.len()];
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(_, t)| t.clone()).collect();
        let lps = scorer.log_probs(&rows, &prefixes)?;
        let mut cands: Vec<(f64, Vec<usize>)> = Vec::new();
        for ((score, prefix), lp) in live.iter().zip(&lps) {
            for (t, &x) in lp.iter().enumerate() {
                if x.is_finite() {
                    let mut seq = prefix.clone();
                    seq.push(t);
                    cands.push((score + x, seq));
                }
            }
        }
        cands.sort_by(by_score_then_tokens);
        cands.truncate(beam);
        live.clear();
        for (score, mut seq) in cands {
            if *seq.last().unwrap() == eos {
                seq.pop();
                finished.push(finish(score, seq, true));
            } else {
                live.push((score, seq));
            }
        }
    }
    finished.sort_by(|a, b| {
        b.normalized
            .partial_cmp(&a.normalized)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    finished.truncate(beam);
    Ok(finished)
}

/// Scores every complete output up to `max_len` tokens and returns the best
/// by normalized score (same conventions as [`beam_search`]). Exponential;
/// for verification on toy vocabularies only.
pub fn exhaustive_search<S: StepScorer>(scorer: &mut S, bos: usize, max_len: usize, alpha: f64) -> Result<Hypothesis> {
    let eos = scorer.eos();
    let mut best: Option<Hypothesis> = None;
    let mut stack: Vec<(f64, Vec<usize>)> = vec![(0.0, vec![bos])];
    let mut consider = |h: Hypothesis| {
        let better = match &best {
            None => true,
            Some(b) => h.normalized > b.normalized || (h.normalized == b.normalized && h.tokens < b.tokens),
        };
        if better {
            best = Some(h);
        }
    };
    while let Some((score, prefix)) = stack.pop() {
        if prefix.len() >= max_len {
            let len = (prefix.len() - 1).max(1) as f64;
            consider(Hypothesis {
                normalized: score / len.powf(alpha),
                tokens: prefix,
                score,
                finished_with_eos: false,
            });
            continue;
        }
        let lp = scorer.log_probs(&[0], std::slice::from_ref(&prefix))?.remove(0);
        for (t, &x) in lp.iter().enumerate() {
            if !x.is_finite() {
                continue;
            }
            if t == eos {
                let len = prefix.len() as f64;
                consider(Hypothesis {
                    normalized: (score + x) / len.powf(alpha),
                    tokens: prefix.clone(),
                    score: score + x,
                    finished_with_eos: true,
                });
            } else {
                let mut seq = prefix.clone();
                seq.push(t);
                stack.push((score + x, seq));
            }
        }
    }
    best.ok_or_else(|| Error::invalid("exhaustive_search", "no finite completion"))
}
