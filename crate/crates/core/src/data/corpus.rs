use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Acoustic frame sequence `s`, row-major `[n_frames, frame_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub n_frames: usize,
    pub frame_dim: usize,
    pub data: Vec<f32>,
}

impl Frames {
    pub fn new(n_frames: usize, frame_dim: usize, data: Vec<f32>) -> Result<Self> {
        if n_frames == 0 || data.len() != n_frames * frame_dim {
            return Err(Error::invalid(
                "frames",
                format!("{n_frames} frames of dim {frame_dim} with {} values", data.len()),
            ));
        }
        Ok(Frames {
            n_frames,
            frame_dim,
            data,
        })
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.frame_dim..(i + 1) * self.frame_dim]
    }
}

/// One speech-transcript-translation triple `(s, x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleExample {
    pub id: String,
    pub frames: Arc<Frames>,
    pub transcript: Vec<String>,
    pub translation: Vec<String>,
    pub src_lang: String,
    pub tgt_lang: String,
}

/// External parallel text pair `(x', y')`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPair {
    pub id: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub src_lang: String,
    pub tgt_lang: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    St,
    Asr,
    Mt,
    MtExt,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::St, Task::Asr, Task::Mt, Task::MtExt];

    pub fn has_audio_source(self) -> bool {
        matches!(self, Task::St | Task::Asr)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::St => "ST",
            Task::Asr => "ASR",
            Task::Mt => "MT",
            Task::MtExt => "MT_EXT",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "ST" => Ok(Task::St),
            "ASR" => Ok(Task::Asr),
            "MT" => Ok(Task::Mt),
            "MT_EXT" | "MTEXT" => Ok(Task::MtExt),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Audio(Arc<Frames>),
    Text(Vec<String>),
}

impl Source {
    pub fn len(&self) -> usize {
        match self {
            Source::Audio(f) => f.n_frames,
            Source::Text(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One supervised pair of a [`TaskDataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct PairItem {
    pub id: String,
    pub source: Source,
    pub target: Vec<String>,
    /// Language of the text source (its encoder tag).
    pub src_lang: String,
    /// Language of the target; used as the decoder BOS tag.
    pub tgt_lang: String,
}

/// Pairwise projection of the triple corpus onto one task, or the external
/// MT pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task: Task,
    pub items: Vec<PairItem>,
}

impl TaskDataset {
    /// Projects triples onto `(s, y)` for ST, `(s, x)` for ASR and `(x, y)`
    /// for MT. `MT_EXT` must come from [`TaskDataset::from_ext`].
    pub fn project(triples: &[TripleExample], task: Task) -> Result<Self> {
        let items = triples
            .iter()
            .map(|t| {
                let (source, target, tgt_lang) = match task {
                    Task::St => (Source::Audio(t.frames.clone()), t.translation.clone(), &t.tgt_lang),
                    Task::Asr => (Source::Audio(t.frames.clone()), t.transcript.clone(), &t.src_lang),
                    Task::Mt => (Source::Text(t.transcript.clone()), t.translation.clone(), &t.tgt_lang),
                    Task::MtExt => {
                        return Err(Error::invalid("project", "MT_EXT pairs come from the external corpus"))
                    }
                };
                Ok(PairItem {
                    id: t.id.clone(),
                    source,
                    target,
                    src_lang: t.src_lang.clone(),
                    tgt_lang: tgt_lang.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(TaskDataset { task, items })
    }

    pub fn from_ext(pairs: &[TextPair]) -> Self {
        let items = pairs
            .iter()
            .map(|p| PairItem {
                id: p.id.clone(),
                source: Source::Text(p.source.clone()),
                target: p.target.clone(),
                src_lang: p.src_lang.clone(),
                tgt_lang: p.tgt_lang.clone(),
            })
            .collect();
        TaskDataset {
            task: Task::MtExt,
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Train/dev/test triples plus the external MT corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<TripleExample>,
    pub dev: Vec<TripleExample>,
    pub test: Vec<TripleExample>,
    pub ext: Vec<TextPair>,
}

impl Corpus {
    pub fn dataset(&self, task: Task) -> Result<TaskDataset> {
        match task {
            Task::MtExt => Ok(TaskDataset::from_ext(&self.ext)),
            t => TaskDataset::project(&self.train, t),
        }
    }

    /// Training-side text on both languages, for vocabulary building.
    pub fn sentences(&self) -> impl Iterator<Item = &Vec<String>> {
        self.train
            .iter()
            .flat_map(|t| [&t.transcript, &t.translation])
            .chain(self.ext.iter().flat_map(|p| [&p.source, &p.target]))
    }

    pub fn lang_codes(&self) -> Vec<String> {
        let mut codes: Vec<String> = Vec::new();
        let all = self
            .train
            .iter()
            .flat_map(|t| [&t.src_lang, &t.tgt_lang])
            .chain(self.ext.iter().flat_map(|p| [&p.src_lang, &p.tgt_lang]));
        for c in all {
            if !codes.contains(c) {
                codes.push(c.clone());
            }
        }
        codes
    }
}
