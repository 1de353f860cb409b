use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{PairItem, Source, Task, TaskDataset};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Examples are sorted by source length inside pools of this many batches.
const BUCKET_POOL: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub enum BatchSource {
    /// Zero-padded frames `[B, max_len, frame_dim]`.
    Audio {
        frames: Vec<f32>,
        lengths: Vec<usize>,
        max_len: usize,
        frame_dim: usize,
    },
    /// Token ids (no tag, no `[eos]`) and the language tag id of each source.
    Text { tokens: Vec<Vec<usize>>, tags: Vec<usize> },
}

/// Encoded mini-batch for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub task: Task,
    pub ids: Vec<String>,
    pub source: BatchSource,
    /// Decoder start token per example: the target-language tag.
    pub bos: Vec<usize>,
    /// Target ids ending in `[eos]`.
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_items(task: Task, items: &[&PairItem], vocab: &Vocabulary) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("batch", "no examples"));
        }
        let source = if task.has_audio_source() {
            let frame_dim = match &items[0].source {
                Source::Audio(f) => f.frame_dim,
                Source::Text(_) => return Err(modality(task)),
            };
            let lengths: Vec<usize> = items.iter().map(|i| i.source.len()).collect();
            let max_len = lengths.iter().copied().max().unwrap_or(0);
            let mut frames = vec![0.0f32; items.len() * max_len * frame_dim];
            for (b, item) in items.iter().enumerate() {
                let Source::Audio(f) = &item.source else {
                    return Err(modality(task));
                };
                if f.frame_dim != frame_dim {
                    return Err(Error::invalid("batch", "mixed frame dimensions"));
                }
                let off = b * max_len * frame_dim;
                frames[off..off + f.data.len()].copy_from_slice(&f.data);
            }
            BatchSource::Audio {
                frames,
                lengths,
                max_len,
                frame_dim,
            }
        } else {
            let mut tokens = Vec::with_capacity(items.len());
            let mut tags = Vec::with_capacity(items.len());
            for item in items {
                let Source::Text(words) = &item.source else {
                    return Err(modality(task));
                };
                tokens.push(words.iter().map(|w| vocab.id(w)).collect());
                tags.push(vocab.lang_id(&item.src_lang)?);
            }
            BatchSource::Text { tokens, tags }
        };
        Ok(Batch {
            task,
            ids: items.iter().map(|i| i.id.clone()).collect(),
            source,
            bos: items.iter().map(|i| vocab.lang_id(&i.tgt_lang)).collect::<Result<_>>()?,
            targets: items.iter().map(|i| vocab.encode_tokens(&i.target)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-pad target tokens (including `[eos]`).
    pub fn n_target_tokens(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }
}

fn modality(task: Task) -> Error {
    Error::Modality {
        task: task.to_string(),
        expected: if task.has_audio_source() { "audio" } else { "text" },
    }
}

/// Index groups for one epoch: shuffled, bucketed by source length inside
/// pools, and with batch order shuffled again. Each index appears exactly
/// once.
pub fn epoch_plan(source_lens: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491).wrapping_add(epoch));
    let mut order: Vec<usize> = (0..source_lens.len()).collect();
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for pool in order.chunks(batch_size * BUCKET_POOL) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| source_lens[i]);
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// One epoch of encoded batches.
pub fn make_batches(dataset: &TaskDataset, vocab: &Vocabulary, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    let lens: Vec<usize> = dataset.items.iter().map(|i| i.source.len()).collect();
    epoch_plan(&lens, batch_size, seed, 0)
        .into_iter()
        .map(|idx| {
            let items: Vec<&PairItem> = idx.iter().map(|&i| &dataset.items[i]).collect();
            Batch::from_items(dataset.task, &items, vocab)
        })
        .collect()
}

/// Endless stream of batches over successive epochs of one dataset.
pub struct BatchStream {
    dataset: Arc<TaskDataset>,
    vocab: Arc<Vocabulary>,
    lens: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    plan: Vec<Vec<usize>>,
    cursor: usize,
}

impl BatchStream {
    pub fn new(dataset: Arc<TaskDataset>, vocab: Arc<Vocabulary>, batch_size: usize, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Config(format!("dataset for {} is empty", dataset.task)));
        }
        let lens = dataset.items.iter().map(|i| i.source.len()).collect();
        Ok(BatchStream {
            dataset,
            vocab,
            lens,
            batch_size,
            seed,
            epoch: 0,
            plan: Vec::new(),
            cursor: 0,
        })
    }

    pub fn task(&self) -> Task {
        self.dataset.task
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.cursor >= self.plan.len() {
            if !self.plan.is_empty() {
                self.epoch += 1;
            }
            self.plan = epoch_plan(&self.lens, self.batch_size, self.seed, self.epoch);
            self.cursor = 0;
        }
        let idx = &self.plan[self.cursor];
        self.cursor += 1;
        let items: Vec<&PairItem> = idx.iter().map(|&i| &self.dataset.items[i]).collect();
        Batch::from_items(self.dataset.task, &items, &self.vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_corpus, SynthSpec};

    fn setup() -> (crate::data::Corpus, Vocabulary) {
        let spec = SynthSpec {
            n_triples: 70,
            n_ext_pairs: 90,
            n_dev: 5,
            n_test: 5,
            ..SynthSpec::default()
        };
        let c = generate_corpus(&spec).unwrap().0;
        let v = crate::data::build_vocab(&c);
        (c, v)
    }

    #[test]
    fn singleton_batches_cover_dataset() {
        let (c, v) = setup();
        let d = c.dataset(Task::Mt).unwrap();
        let batches = make_batches(&d, &v, 1, 3).unwrap();
        assert_eq!(batches.len(), d.len());
        assert!(batches.iter().all(|b| b.len() == 1 && b.task == Task::Mt));
    }

    #[test]
    fn epoch_is_a_permutation_and_seeded() {
        let lens: Vec<usize> = (0..257).map(|i| (i * 7919) % 31).collect();
        let plan = epoch_plan(&lens, 8, 9, 0);
        let mut all: Vec<usize> = plan.concat();
        all.sort();
        assert_eq!(all, (0..257).collect::<Vec<_>>());
        assert_eq!(plan, epoch_plan(&lens, 8, 9, 0));
        assert_ne!(plan, epoch_plan(&lens, 8, 9, 1));
    }

    #[test]
    fn audio_batch_pads_with_zeros_and_uses_tags() {
        let (c, v) = setup();
        let d = c.dataset(Task::Asr).unwrap();
        let items: Vec<&PairItem> = d.items.iter().take(4).collect();
        let b = Batch::from_items(Task::Asr, &items, &v).unwrap();
        let BatchSource::Audio { frames, lengths, max_len, frame_dim } = &b.source else { panic!() };
        for (i, &l) in lengths.iter().enumerate() {
            let row = &frames[i * max_len * frame_dim..(i + 1) * max_len * frame_dim];
            assert!(row[l * frame_dim..].iter().all(|&x| x == 0.0));
        }
        // ASR decodes in the source language.
        assert!(b.bos.iter().all(|&t| t == v.lang_id("en").unwrap()));
        assert!(b.targets.iter().all(|t| *t.last().unwrap() == crate::data::EOS));
    }

    #[test]
    fn wrong_modality_is_rejected() {
        let (c, v) = setup();
        let d = c.dataset(Task::Mt).unwrap();
        let items: Vec<&PairItem> = d.items.iter().take(2).collect();
        assert!(matches!(Batch::from_items(Task::St, &items, &v), Err(Error::Modality { .. })));
    }

    #[test]
    fn stream_cycles_epochs() {
        let (c, v) = setup();
        let d = Arc::new(c.dataset(Task::St).unwrap());
        let mut s = BatchStream::new(d.clone(), Arc::new(v), 16, 5).unwrap();
        let mut seen = Vec::new();
        for _ in 0..5 {
            seen.extend(s.next_batch().unwrap().ids);
        }
        assert_eq!(s.epoch(), 0);
        seen.sort();
        let mut expect: Vec<String> = d.items.iter().map(|i| i.id.clone()).collect();
        expect.sort();
        assert_eq!(seen, expect);
        s.next_batch().unwrap();
        assert_eq!(s.epoch(), 1);
    }
}
