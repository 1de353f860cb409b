use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::infer::DecodeOptions;
use crate::model::ModelConfig;
use crate::train::{TrainOptions, TrainingRecipe, PRESETS};

/// Everything a command needs, resolved from a `key = value` file plus
/// command-line overrides. Keys are grouped by prefix: `corpus.*`,
/// `model.*`, `train.*`, `decode.*`, `ablate.*`, `sweep.*`, and the bare
/// keys `recipe`, `stage`, `data`, `out`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: SynthSpec,
    /// Overrides applied on top of the desk model config. `vocab_size` and
    /// `frame_dim` always come from the data.
    pub model: Vec<(String, String)>,
    pub train: TrainOptions,
    pub recipe: String,
    /// Inline stages; when non-empty they replace `recipe`.
    pub stages: Vec<String>,
    pub decode: DecodeOptions,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Seeds for `ablate`; empty means three seeds from `train.seed`.
    pub seeds: Vec<u64>,
    /// Recipes for `ablate`; empty means every preset.
    pub recipes: Vec<String>,
    pub ext_sizes: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: SynthSpec::default(),
            model: Vec::new(),
            train: TrainOptions::default(),
            recipe: "exp1".into(),
            stages: Vec::new(),
            decode: DecodeOptions::default(),
            data_dir: None,
            out_dir: None,
            seeds: Vec::new(),
            recipes: Vec::new(),
            ext_sizes: vec![2000, 5000, 10_000, 20_000],
        }
    }
}

/// Name of the resolved-config echo written next to every command's output.
pub const RESOLVED_CONFIG: &str = "config.resolved";

const DERIVED_MODEL_KEYS: [&str; 2] = ["vocab_size", "frame_dim"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    /// Parses `key = value` lines; `#` starts a comment. `stage` may repeat.
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("corpus.") {
            return self.set_corpus(k, value, key);
        }
        if let Some(k) = key.strip_prefix("model.") {
            if DERIVED_MODEL_KEYS.contains(&k) {
                return Err(Error::Config(format!("`{key}` is derived from the data and cannot be set")));
            }
            // Checks key and value now; cross-field constraints wait for
            // the full config.
            ModelConfig::desk(1, 1).set(k, value)?;
            self.model.retain(|(mk, _)| mk != k);
            self.model.push((k.to_string(), value.to_string()));
            return Ok(());
        }
        if let Some(k) = key.strip_prefix("train.") {
            return self.set_train(k, value, key);
        }
        let t = &mut self.decode;
        match key {
            "decode.beam" => t.beam_size = parse(key, value)?,
            "decode.max_len" => t.max_len = if value == "auto" { None } else { Some(parse(key, value)?) },
            "decode.length_penalty" => t.length_penalty = parse(key, value)?,
            "decode.batch_size" => t.batch_size = parse(key, value)?,
            "recipe" => {
                TrainingRecipe::preset(value)?;
                self.recipe = value.to_string();
            }
            "stage" => self.stages.push(value.to_string()),
            "data" => self.data_dir = Some(PathBuf::from(value)),
            "out" => self.out_dir = Some(PathBuf::from(value)),
            "ablate.seeds" => self.seeds = parse_list(key, value)?,
            "ablate.recipes" => {
                let names: Vec<String> = parse_list(key, value)?;
                for n in &names {
                    TrainingRecipe::preset(n)?;
                }
                self.recipes = names;
            }
            "sweep.sizes" => self.ext_sizes = parse_list(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    fn set_corpus(&mut self, k: &str, v: &str, key: &str) -> Result<()> {
        let c = &mut self.corpus;
        match k {
            "seed" => c.seed = parse(key, v)?,
            "n_triples" => c.n_triples = parse(key, v)?,
            "n_ext_pairs" => c.n_ext_pairs = parse(key, v)?,
            "src_vocab_size" => c.src_vocab_size = parse(key, v)?,
            "min_len" => c.min_len = parse(key, v)?,
            "max_len" => c.max_len = parse(key, v)?,
            "ext_min_len" => c.ext_min_len = parse(key, v)?,
            "ext_max_len" => c.ext_max_len = parse(key, v)?,
            "min_frames_per_token" => c.min_frames_per_token = parse(key, v)?,
            "max_frames_per_token" => c.max_frames_per_token = parse(key, v)?,
            "frame_dim" => c.frame_dim = parse(key, v)?,
            "noise_sigma" => c.noise_sigma = parse(key, v)?,
            "n_dev" => c.n_dev = parse(key, v)?,
            "n_test" => c.n_test = parse(key, v)?,
            "src_lang" => c.src_lang = v.to_string(),
            "tgt_lang" => c.tgt_lang = v.to_string(),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    fn set_train(&mut self, k: &str, v: &str, key: &str) -> Result<()> {
        let t = &mut self.train;
        match k {
            "seed" => t.seed = parse(key, v)?,
            "base_lr" => t.base_lr = parse(key, v)?,
            "warmup" => t.warmup = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "label_smoothing" => t.label_smoothing = parse(key, v)?,
            "eval_interval" => t.eval_interval = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "avg_k" => t.avg_k = parse(key, v)?,
            "pretrain_steps" => t.pretrain_steps = parse(key, v)?,
            "finetune_steps" => t.finetune_steps = parse(key, v)?,
            "dev_size" => t.dev_size = parse(key, v)?,
            "max_steps" => t.max_total_steps = if v == "none" { None } else { Some(parse(key, v)?) },
            "keep_checkpoints" => t.keep_checkpoints = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order. Parsing this
    /// text back yields an equal config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let c = &self.corpus;
        kv("corpus.seed", c.seed.to_string());
        kv("corpus.n_triples", c.n_triples.to_string());
        kv("corpus.n_ext_pairs", c.n_ext_pairs.to_string());
        kv("corpus.src_vocab_size", c.src_vocab_size.to_string());
        kv("corpus.min_len", c.min_len.to_string());
        kv("corpus.max_len", c.max_len.to_string());
        kv("corpus.ext_min_len", c.ext_min_len.to_string());
        kv("corpus.ext_max_len", c.ext_max_len.to_string());
        kv("corpus.min_frames_per_token", c.min_frames_per_token.to_string());
        kv("corpus.max_frames_per_token", c.max_frames_per_token.to_string());
        kv("corpus.frame_dim", c.frame_dim.to_string());
        kv("corpus.noise_sigma", c.noise_sigma.to_string());
        kv("corpus.n_dev", c.n_dev.to_string());
        kv("corpus.n_test", c.n_test.to_string());
        kv("corpus.src_lang", c.src_lang.clone());
        kv("corpus.tgt_lang", c.tgt_lang.clone());
        let mut model = ModelConfig::desk(1, 1);
        for (k, v) in &self.model {
            let _ = model.set(k, v);
        }
        for (k, v) in model.to_pairs() {
            if !DERIVED_MODEL_KEYS.contains(&k.as_str()) {
                kv(&format!("model.{k}"), v);
            }
        }
        let t = &self.train;
        kv("train.seed", t.seed.to_string());
        kv("train.base_lr", t.base_lr.to_string());
        kv("train.warmup", t.warmup.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.label_smoothing", t.label_smoothing.to_string());
        kv("train.eval_interval", t.eval_interval.to_string());
        kv("train.patience", t.patience.to_string());
        kv("train.avg_k", t.avg_k.to_string());
        kv("train.pretrain_steps", t.pretrain_steps.to_string());
        kv("train.finetune_steps", t.finetune_steps.to_string());
        kv("train.dev_size", t.dev_size.to_string());
        kv("train.max_steps", t.max_total_steps.map_or("none".into(), |n| n.to_string()));
        kv("train.keep_checkpoints", t.keep_checkpoints.to_string());
        kv("recipe", self.recipe.clone());
        for st in &self.stages {
            kv("stage", st.clone());
        }
        let d = &self.decode;
        kv("decode.beam", d.beam_size.to_string());
        kv("decode.max_len", d.max_len.map_or("auto".into(), |n| n.to_string()));
        kv("decode.length_penalty", d.length_penalty.to_string());
        kv("decode.batch_size", d.batch_size.to_string());
        if let Some(p) = &self.data_dir {
            kv("data", p.display().to_string());
        }
        if let Some(p) = &self.out_dir {
            kv("out", p.display().to_string());
        }
        if !self.seeds.is_empty() {
            kv("ablate.seeds", join(&self.seeds));
        }
        if !self.recipes.is_empty() {
            kv("ablate.recipes", self.recipes.join(","));
        }
        kv("sweep.sizes", join(&self.ext_sizes));
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_config_string()).map_err(|e| Error::io(&path, e))
    }

    /// Desk config for the given data dimensions with the `model.*`
    /// overrides applied.
    pub fn model_config(&self, vocab_size: usize, frame_dim: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::desk(vocab_size, frame_dim);
        for (k, v) in &self.model {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inline stages if any were given, otherwise the named preset.
    pub fn training_recipe(&self) -> Result<TrainingRecipe> {
        if self.stages.is_empty() {
            TrainingRecipe::preset(&self.recipe)
        } else {
            TrainingRecipe::from_specs("custom", &self.stages)
        }
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..3).map(|i| self.train.seed + i).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn ablation_recipes(&self) -> Vec<String> {
        if self.recipes.is_empty() {
            PRESETS.iter().map(|s| s.to_string()).collect()
        } else {
            self.recipes.clone()
        }
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("an output directory is required (--out)".into()))
    }

    pub fn require_data(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| Error::Config("a data directory is required (--data)".into()))
    }
}
