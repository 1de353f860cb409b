//! Binary checkpoints: `XSTCKPT1`, u32 version, a length-prefixed block of
//! `key=value` lines, then each tensor as (name, rank, dims, f32 LE data).
//! All integers are u32 little-endian.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, XstNetModel};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XSTCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config: ModelConfig,
    /// Provenance such as recipe and stage; config keys are stored
    /// separately under a `model.` prefix.
    pub metadata: Vec<(String, String)>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model(model: &XstNetModel<f32>, step: usize, metadata: Vec<(String, String)>) -> Self {
        Checkpoint {
            step,
            config: model.config().clone(),
            metadata,
            params: model.params().clone(),
        }
    }

    /// Validates names and shapes against the stored config.
    pub fn to_model(&self) -> Result<XstNetModel<f32>> {
        XstNetModel::from_params(self.config.clone(), self.params.clone())
    }

    /// Validates against an expected config instead of the stored one.
    pub fn to_model_with(&self, config: &ModelConfig) -> Result<XstNetModel<f32>> {
        XstNetModel::from_params(config.clone(), self.params.clone())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = String::new();
        meta.push_str(&format!("step={}\n", self.step));
        meta.push_str(&format!("n_tensors={}\n", self.params.len()));
        for (k, v) in self.config.to_pairs() {
            meta.push_str(&format!("model.{k}={v}\n"));
        }
        for (k, v) in &self.metadata {
            meta.push_str(&format!("{k}={v}\n"));
        }
        let payload: usize = self.params.values().map(|t| 4 * t.len() + 64).sum();
        let mut out = Vec::with_capacity(16 + meta.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(meta.as_bytes());
        for (name, t) in &self.params {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |m: String| Error::Format {
            path: path.to_path_buf(),
            message: m,
        };
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| fmt("metadata is not UTF-8".into()))?;
        let mut step = None;
        let mut n_tensors = None;
        let mut model_pairs = Vec::new();
        let mut metadata = Vec::new();
        for line in meta.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| fmt(format!("bad metadata line `{line}`")))?;
            match k {
                "step" => step = v.parse().ok(),
                "n_tensors" => n_tensors = v.parse::<usize>().ok(),
                _ => match k.strip_prefix("model.") {
                    Some(mk) => model_pairs.push((mk, v)),
                    None => metadata.push((k.to_string(), v.to_string())),
                },
            }
        }
        let step = step.ok_or_else(|| fmt("metadata lacks `step`".into()))?;
        let n_tensors = n_tensors.ok_or_else(|| fmt("metadata lacks `n_tensors`".into()))?;
        let config = ModelConfig::from_pairs(model_pairs)?;
        let mut params = ParamStore::new();
        for _ in 0..n_tensors {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| fmt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(fmt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            step,
            config,
            metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Elementwise mean of every named tensor (accumulated in f64). The result
/// keeps the newest step and config and drops provenance except a count.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::invalid("average_checkpoints", "need at least one checkpoint"))?;
    for c in &ckpts[1..] {
        for (name, t) in &first.params {
            match c.params.get(name) {
                None => {
                    return Err(Error::Checkpoint {
                        name: name.clone(),
                        message: "missing from a checkpoint being averaged".into(),
                    })
                }
                Some(u) if u.shape() != t.shape() => {
                    return Err(Error::Checkpoint {
                        name: name.clone(),
                        message: format!("shapes differ: {:?} vs {:?}", t.shape(), u.shape()),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = c.params.keys().find(|k| !first.params.contains_key(*k)) {
            return Err(Error::Checkpoint {
                name: extra.clone(),
                message: "not present in every checkpoint".into(),
            });
        }
    }
    let k = ckpts.len() as f64;
    let params = first
        .params
        .iter()
        .map(|(name, t)| {
            let mut acc = vec![0f64; t.len()];
            for c in ckpts {
                for (a, &x) in acc.iter_mut().zip(c.params[name].data()) {
                    *a += x as f64;
                }
            }
            let data = acc.into_iter().map(|a| (a / k) as f32).collect();
            (name.clone(), Tensor::new(t.shape().to_vec(), data).expect("shape preserved"))
        })
        .collect();
    let newest = ckpts.iter().max_by_key(|c| c.step).unwrap_or(first);
    Ok(Checkpoint {
        step: newest.step,
        config: newest.config.clone(),
        metadata: vec![("averaged".into(), ckpts.len().to_string())],
        params,
    })
}

/// `checkpoint_<step>.xst` files in `dir`, sorted by step ascending.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(step) = name
            .strip_prefix("checkpoint_")
            .and_then(|s| s.strip_suffix(".xst"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn checkpoint_file_name(step: usize) -> String {
    format!("checkpoint_{step:06}.xst")
}
