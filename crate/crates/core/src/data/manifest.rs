//! On-disk corpus layout.
//!
//! A split is a UTF-8 TSV manifest
//! (`id frames_file n_frames src_lang tgt_lang transcript translation`)
//! plus a binary frames sidecar: the magic `XSTFRM1\0`, then per utterance
//! the id length (u32 LE), id bytes, `n_frames` (u32 LE), `frame_dim`
//! (u32 LE) and the frames as f32 LE. External MT pairs live in a separate
//! TSV (`id src_lang tgt_lang source target`).

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::corpus::{Frames, TextPair, TripleExample};
use crate::error::{Error, Result};

pub const FRAMES_MAGIC: &[u8; 8] = b"XSTFRM1\0";
pub const MANIFEST_HEADER: &str = "id\tframes_file\tn_frames\tsrc_lang\ttgt_lang\ttranscript\ttranslation";
pub const EXT_HEADER: &str = "id\tsrc_lang\ttgt_lang\tsource\ttarget";

/// Writes `<stem>.tsv` and its sidecar `<stem>.frames` into `dir`; returns
/// the manifest path.
pub fn write_manifest(dir: &Path, stem: &str, triples: &[TripleExample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frames_name = format!("{stem}.frames");
    let mut tsv = String::from(MANIFEST_HEADER);
    tsv.push('\n');
    let mut bin = Vec::from(&FRAMES_MAGIC[..]);
    for t in triples {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            t.id,
            frames_name,
            t.frames.n_frames,
            t.src_lang,
            t.tgt_lang,
            t.transcript.join(" "),
            t.translation.join(" ")
        ));
        bin.extend_from_slice(&(t.id.len() as u32).to_le_bytes());
        bin.extend_from_slice(t.id.as_bytes());
        bin.extend_from_slice(&(t.frames.n_frames as u32).to_le_bytes());
        bin.extend_from_slice(&(t.frames.frame_dim as u32).to_le_bytes());
        for v in &t.frames.data {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = dir.join(format!("{stem}.tsv"));
    let sidecar = dir.join(&frames_name);
    std::fs::write(&manifest, tsv).map_err(|e| Error::io(&manifest, e))?;
    std::fs::write(&sidecar, bin).map_err(|e| Error::io(&sidecar, e))?;
    Ok(manifest)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_frames(path: &Path) -> Result<HashMap<String, Arc<Frames>>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(8)? != FRAMES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "bad magic".into(),
        });
    }
    let mut out = HashMap::new();
    while r.pos < buf.len() {
        let id_len = r.u32()? as usize;
        let id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            message: "id is not UTF-8".into(),
        })?;
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let data = r
            .take(n * d * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let frames = Frames::new(n, d, data).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("utterance {id}: {e}"),
        })?;
        out.insert(id, Arc::new(frames));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<TripleExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        _ => return Err(parse_err(1, "missing manifest header".into())),
    }
    let mut sidecars: HashMap<String, HashMap<String, Arc<Frames>>> = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(parse_err(lineno, format!("expected 7 columns, found {}", cols.len())));
        }
        let n_frames: usize = cols[2]
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad n_frames `{}`", cols[2])))?;
        if !sidecars.contains_key(cols[1]) {
            sidecars.insert(cols[1].to_string(), read_frames(&dir.join(cols[1]))?);
        }
        let frames = sidecars[cols[1]].get(cols[0]).cloned().ok_or_else(|| {
            parse_err(lineno, format!("utterance {} missing from {}", cols[0], cols[1]))
        })?;
        if frames.n_frames != n_frames {
            return Err(parse_err(
                lineno,
                format!(
                    "utterance {}: manifest says {} frames, sidecar has {}",
                    cols[0], n_frames, frames.n_frames
                ),
            ));
        }
        let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        out.push(TripleExample {
            id: cols[0].to_string(),
            frames,
            src_lang: cols[3].to_string(),
            tgt_lang: cols[4].to_string(),
            transcript: words(cols[5]),
            translation: words(cols[6]),
        });
    }
    Ok(out)
}

pub fn write_ext_pairs(path: &Path, pairs: &[TextPair]) -> Result<()> {
    let mut tsv = String::from(EXT_HEADER);
    tsv.push('\n');
    for p in pairs {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            p.id,
            p.src_lang,
            p.tgt_lang,
            p.source.join(" "),
            p.target.join(" ")
        ));
    }
    std::fs::write(path, tsv).map_err(|e| Error::io(path, e))
}

pub fn read_ext_pairs(path: &Path) -> Result<Vec<TextPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == EXT_HEADER => {}
        _ => return Err(parse_err(1, "missing header".into())),
    }
    lines
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(parse_err(i + 1, format!("expected 5 columns, found {}", cols.len())));
            }
            let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
            Ok(TextPair {
                id: cols[0].to_string(),
                src_lang: cols[1].to_string(),
                tgt_lang: cols[2].to_string(),
                source: words(cols[3]),
                target: words(cols[4]),
            })
        })
        .collect()
}
