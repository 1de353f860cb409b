use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const AUDIO: usize = 3;

const SPECIALS: [&str; 4] = ["[pad]", "[eos]", "[unk]", "[audio]"];

/// Surface form of a language indicator token, e.g. `[en]`.
pub fn lang_tag(code: &str) -> String {
    format!("[{code}]")
}

/// Joint bilingual token table.
///
/// Layout: `[pad]=0, [eos]=1, [unk]=2, [audio]=3`, then one tag per
/// language in registration order, then content tokens by descending
/// frequency (ties broken lexicographically).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    n_langs: usize,
}

impl Vocabulary {
    pub fn build<'a, S>(sentences: impl IntoIterator<Item = S>, lang_codes: &[&str]) -> Self
    where
        S: IntoIterator<Item = &'a String>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for sentence in sentences {
            for tok in sentence {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(lang_codes.iter().map(|c| lang_tag(c)));
        let mut content: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !tokens.iter().any(|s| s == t))
            .collect();
        // BTreeMap order is lexicographic; a stable sort on count keeps it for ties.
        content.sort_by(|a, b| b.1.cmp(&a.1));
        tokens.extend(content.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens, lang_codes.len())
    }

    fn from_tokens(tokens: Vec<String>, n_langs: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            n_langs,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("[unk]", String::as_str)
    }

    pub fn lang_codes(&self) -> Vec<&str> {
        self.tokens[SPECIALS.len()..SPECIALS.len() + self.n_langs]
            .iter()
            .map(|t| &t[1..t.len() - 1])
            .collect()
    }

    /// Id of the `[code]` tag; errors for unregistered languages.
    pub fn lang_id(&self, code: &str) -> Result<usize> {
        let tag = lang_tag(code);
        match self.index.get(&tag) {
            Some(&id) if self.is_lang_id(id) => Ok(id),
            _ => Err(Error::UnknownTag(tag)),
        }
    }

    pub fn is_lang_id(&self, id: usize) -> bool {
        (SPECIALS.len()..SPECIALS.len() + self.n_langs).contains(&id)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len() + self.n_langs
    }

    /// Whitespace-tokenises `sentence` and appends `[eos]`.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = sentence.split_whitespace().map(|t| self.id(t)).collect();
        ids.push(EOS);
        ids
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids: Vec<usize> = tokens.iter().map(|t| self.id(t.as_ref())).collect();
        ids.push(EOS);
        ids
    }

    /// Inverse of [`Vocabulary::encode`]: stops at the first `[eos]`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(i + 1, "expected `token<TAB>id`".into()))?;
            let id: usize = id.parse().map_err(|_| parse_err(i + 1, format!("bad id `{id}`")))?;
            if id != i {
                return Err(parse_err(i + 1, format!("ids must ascend from 0, found {id}")));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(parse_err(1, "missing special tokens".into()));
        }
        let n_langs = tokens[SPECIALS.len()..]
            .iter()
            .take_while(|t| t.len() > 2 && t.starts_with('[') && t.ends_with(']'))
            .count();
        Ok(Self::from_tokens(tokens, n_langs))
    }
}
