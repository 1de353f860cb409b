//! Synthetic triple corpus, joint vocabulary, on-disk manifests and
//! task-wise batching.

mod batch;
mod corpus;
mod manifest;
mod synth;
mod vocab;

pub use batch::{epoch_plan, make_batches, Batch, BatchSource, BatchStream};
pub use corpus::{Corpus, Frames, PairItem, Source, Task, TaskDataset, TextPair, TripleExample};
pub use manifest::{
    read_ext_pairs, read_frames, read_manifest, write_ext_pairs, write_manifest, EXT_HEADER, FRAMES_MAGIC,
    MANIFEST_HEADER,
};
pub use synth::{generate_corpus, Lexicon, SynthSpec};
pub use vocab::{lang_tag, Vocabulary, AUDIO, EOS, PAD, UNK};

/// Joint vocabulary over the training text of both languages.
pub fn build_vocab(corpus: &Corpus) -> Vocabulary {
    let codes = corpus.lang_codes();
    let codes: Vec<&str> = codes.iter().map(String::as_str).collect();
    Vocabulary::build(corpus.sentences(), &codes)
}
