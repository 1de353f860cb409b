//! Greedy and beam decoding. The decoder is primed with a language tag, so
//! one model produces transcripts (`[en]`) or translations (`[fr]`) from
//! the same audio depending only on that first token.

mod search;

use std::io::Write;
use std::path::Path;

pub use search::{beam_search, exhaustive_search, greedy_search, Hypothesis, StepScorer};

use crate::data::{read_manifest, Batch, BatchSource, PairItem, Task, TaskDataset, Vocabulary, AUDIO, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::XstNetModel;
use crate::numerics::{Element, Tensor};

pub const DEFAULT_BEAM: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    /// 1 selects greedy decoding.
    pub beam_size: usize,
    /// Output length cap including the leading tag; `None` uses
    /// `2 * encoder_len + 10`.
    pub max_len: Option<usize>,
    pub length_penalty: f64,
    /// Sentences encoded together by greedy decoding.
    pub batch_size: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam_size: DEFAULT_BEAM,
            max_len: None,
            length_penalty: 1.0,
            batch_size: 50,
        }
    }
}

impl DecodeOptions {
    pub fn greedy() -> Self {
        DecodeOptions {
            beam_size: 1,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == Some(0) || self.batch_size == 0 {
            return Err(Error::invalid("decode", "beam_size, max_len and batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Decoder scores for a fixed encoder memory. Row `r` of a request is
/// continued against memory row `rows[r]`. `[pad]`, `[audio]` and language
/// tags are never proposed.
pub struct ModelScorer<'m, F: Element> {
    model: &'m XstNetModel<F>,
    memory: Tensor<F>,
    lengths: Vec<usize>,
    banned: Vec<usize>,
}

impl<'m, F: Element> ModelScorer<'m, F> {
    pub fn new(model: &'m XstNetModel<F>, vocab: &Vocabulary, source: &BatchSource) -> Result<Self> {
        let mut s = model.eval_session();
        let mem = s.encode(source)?;
        let memory = s.graph.value(mem.var).clone();
        let mut banned = vec![PAD, AUDIO];
        banned.extend((0..vocab.len()).filter(|&i| vocab.is_lang_id(i)));
        Ok(ModelScorer {
            model,
            memory,
            lengths: mem.lengths,
            banned,
        })
    }

    /// Encoder output length of each source row.
    pub fn source_lengths(&self) -> &[usize] {
        &self.lengths
    }
}

impl<F: Element> StepScorer for ModelScorer<'_, F> {
    fn eos(&self) -> usize {
        EOS
    }

    fn log_probs(&mut self, rows: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let s = self.memory.shape();
        let (l, d) = (s[1], s[2]);
        let mut data = Vec::with_capacity(rows.len() * l * d);
        for &r in rows {
            data.extend_from_slice(&self.memory.data()[r * l * d..(r + 1) * l * d]);
        }
        let lengths = rows.iter().map(|&r| self.lengths[r]).collect();
        let mut sess = self.model.eval_session();
        let mem = sess.constant_seq(Tensor::new(vec![rows.len(), l, d], data)?, lengths);
        let logits = sess.decoder_forward(prefixes, &mem)?;
        let shape = sess.graph.shape(logits).to_vec();
        let (lt, v) = (shape[1], shape[2]);
        let vals = sess.graph.value(logits).data();
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let row = &vals[(b * lt + p.len() - 1) * v..(b * lt + p.len()) * v];
                let mut lp = log_softmax(row);
                for &t in &self.banned {
                    lp[t] = f64::NEG_INFINITY;
                }
                lp
            })
            .collect())
    }
}

fn log_softmax<F: Element>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x.as_f64() - lse).collect()
}

fn default_max_len(encoder_len: usize) -> usize {
    2 * encoder_len + 10
}

/// Greedy decoding of every row of `source`; each output starts with its
/// `bos` tag and excludes `[eos]`.
pub fn greedy_decode<F: Element>(
    model: &XstNetModel<F>,
    vocab: &Vocabulary,
    source: &BatchSource,
    bos: &[usize],
    max_len: Option<usize>,
) -> Result<Vec<Vec<usize>>> {
    let mut scorer = ModelScorer::new(model, vocab, source)?;
    let caps: Vec<usize> = scorer
        .source_lengths()
        .iter()
        .map(|&n| max_len.unwrap_or_else(|| default_max_len(n)))
        .collect();
    greedy_search(&mut scorer, bos, &caps)
}

/// Beam search over one source (`source` must hold a single row).
pub fn beam_decode<F: Element>(
    model: &XstNetModel<F>,
    vocab: &Vocabulary,
    source: &BatchSource,
    bos: usize,
    opts: &DecodeOptions,
) -> Result<Vec<Hypothesis>> {
    opts.validate()?;
    let mut scorer = ModelScorer::new(model, vocab, source)?;
    if scorer.source_lengths().len() != 1 {
        return Err(Error::invalid("beam_decode", "expects exactly one source"));
    }
    let cap = opts.max_len.unwrap_or_else(|| default_max_len(scorer.source_lengths()[0]));
    beam_search(&mut scorer, bos, cap, opts.beam_size, opts.length_penalty)
}

/// Best output token ids (tag first) for every item of `dataset`, in order.
pub fn decode_dataset<F: Element>(
    model: &XstNetModel<F>,
    vocab: &Vocabulary,
    dataset: &TaskDataset,
    opts: &DecodeOptions,
) -> Result<Vec<Vec<usize>>> {
    opts.validate()?;
    let mut out = Vec::with_capacity(dataset.len());
    let chunk = if opts.beam_size == 1 { opts.batch_size } else { 1 };
    for items in dataset.items.chunks(chunk) {
        let refs: Vec<&PairItem> = items.iter().collect();
        let batch = Batch::from_items(dataset.task, &refs, vocab)?;
        if opts.beam_size == 1 {
            out.extend(greedy_decode(model, vocab, &batch.source, &batch.bos, opts.max_len)?);
        } else {
            let best = beam_decode(model, vocab, &batch.source, batch.bos[0], opts)?;
            out.push(best.into_iter().next().map(|h| h.tokens).unwrap_or_default());
        }
    }
    Ok(out)
}

/// Output text without the leading tag.
pub fn detokenize(vocab: &Vocabulary, tokens: &[usize]) -> String {
    let body = match tokens.first() {
        Some(&t) if vocab.is_lang_id(t) => &tokens[1..],
        _ => tokens,
    };
    vocab.decode(body)
}

/// Detokenised hypotheses for every item of `dataset`.
pub fn translate<F: Element>(
    model: &XstNetModel<F>,
    vocab: &Vocabulary,
    dataset: &TaskDataset,
    opts: &DecodeOptions,
) -> Result<Vec<String>> {
    Ok(decode_dataset(model, vocab, dataset, opts)?
        .iter()
        .map(|t| detokenize(vocab, t))
        .collect())
}

/// Decodes every row of a triple manifest for `task` and writes one
/// hypothesis per line to `out`. Returns the hypotheses.
pub fn batch_translate<F: Element>(
    model: &XstNetModel<F>,
    vocab: &Vocabulary,
    manifest: &Path,
    task: Task,
    opts: &DecodeOptions,
    out: &Path,
) -> Result<Vec<String>> {
    let triples = read_manifest(manifest)?;
    let dataset = TaskDataset::project(&triples, task)?;
    let hyps = translate(model, vocab, &dataset, opts)?;
    write_lines(out, &hyps)?;
    Ok(hyps)
}

/// UTF-8, one line per entry, `\n` endings.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
