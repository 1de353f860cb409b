use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::config::RunConfig;
use crate::data::{
    build_vocab, generate_corpus, read_ext_pairs, read_manifest, write_ext_pairs, write_manifest, Corpus, Task,
    TaskDataset, Vocabulary,
};
use crate::error::{Error, Result};
use crate::infer::{translate, write_lines};
use crate::metrics::{corpus_bleu, emit_report, read_lines, wer, ScoreReport};
use crate::train::{
    average_checkpoints, evaluate, list_checkpoints, run_recipe, Checkpoint, DevMetric, RecipeOutcome, Split,
    TrainData, TrainingRecipe,
};

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const DEV_MANIFEST: &str = "dev.tsv";
pub const TEST_MANIFEST: &str = "test.tsv";
pub const EXT_PAIRS: &str = "ext.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const ABLATION_HEADER: &str = "recipe,seed,test_st_bleu,dev_mt_bleu,dev_asr_wer";
pub const SWEEP_HEADER: &str = "ext_size,mt_bleu,st_bleu";
pub const CONVERGENCE_HEADER: &str = "recipe,seed,stage_step,global_step,dev_st_bleu";

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Split sizes as printed by `gen-data`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSummary {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub ext: usize,
    pub vocab: usize,
}

fn write_corpus(corpus: &Corpus, vocab: &Vocabulary, dir: &Path) -> Result<()> {
    write_manifest(dir, "train", &corpus.train)?;
    write_manifest(dir, "dev", &corpus.dev)?;
    write_manifest(dir, "test", &corpus.test)?;
    write_ext_pairs(&dir.join(EXT_PAIRS), &corpus.ext)?;
    vocab.save(&dir.join(VOCAB_FILE))
}

/// Generates the synthetic corpus and writes manifests, frames, external
/// pairs and the vocabulary into the output directory.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<CorpusSummary> {
    let out = cfg.require_out()?;
    let (corpus, _) = generate_corpus(&cfg.corpus)?;
    let vocab = build_vocab(&corpus);
    create_dir(out)?;
    write_corpus(&corpus, &vocab, out)?;
    cfg.write_resolved(out)?;
    let summary = CorpusSummary {
        train: corpus.train.len(),
        dev: corpus.dev.len(),
        test: corpus.test.len(),
        ext: corpus.ext.len(),
        vocab: vocab.len(),
    };
    println!(
        "train {}  dev {}  test {}  ext {}  vocab {}",
        summary.train, summary.dev, summary.test, summary.ext, summary.vocab
    );
    Ok(summary)
}

/// Reads a directory written by [`cmd_gen_data`].
pub fn load_corpus(dir: &Path) -> Result<(Corpus, Vocabulary)> {
    let corpus = Corpus {
        train: read_manifest(&dir.join(TRAIN_MANIFEST))?,
        dev: read_manifest(&dir.join(DEV_MANIFEST))?,
        test: read_manifest(&dir.join(TEST_MANIFEST))?,
        ext: read_ext_pairs(&dir.join(EXT_PAIRS))?,
    };
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    Ok((corpus, vocab))
}

fn frame_dim(corpus: &Corpus) -> Result<usize> {
    corpus
        .train
        .first()
        .map(|t| t.frames.frame_dim)
        .ok_or_else(|| Error::Config("empty corpus: no training triples".into()))
}

fn train_data(cfg: &RunConfig) -> Result<(TrainData, usize)> {
    let (corpus, vocab) = load_corpus(cfg.require_data()?)?;
    let fd = frame_dim(&corpus)?;
    Ok((TrainData::from_corpus(&corpus, vocab)?, fd))
}

fn run_one(cfg: &RunConfig, data: &TrainData, frame_dim: usize, recipe: &TrainingRecipe, out: &Path) -> Result<RecipeOutcome> {
    let model_cfg = cfg.model_config(data.vocab.len(), frame_dim)?;
    info!("recipe {}: {}", recipe.name, describe(recipe));
    run_recipe(recipe, data, &model_cfg, &cfg.train, Some(out))
}

fn describe(recipe: &TrainingRecipe) -> String {
    recipe
        .stages
        .iter()
        .map(|s| format!("{}[{s}]", s.name))
        .collect::<Vec<_>>()
        .join(" -> ")
}

/// Trains one recipe; writes checkpoints, `metrics.csv` and `average.xst`.
pub fn cmd_train(cfg: &RunConfig) -> Result<RecipeOutcome> {
    let out = cfg.require_out()?;
    let recipe = cfg.training_recipe()?;
    recipe.validate()?;
    let (data, fd) = train_data(cfg)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let outcome = run_one(cfg, &data, fd, &recipe, out)?;
    for s in &outcome.stages {
        let best = s.best.map_or("-".to_string(), |(step, v)| format!("{v:.4} at step {step}"));
        println!("stage {}: {} steps, best {} {}", s.name, s.steps, s.metric.name(), best);
    }
    Ok(outcome)
}

fn manifest_for(split: &str) -> Result<&'static str> {
    match split {
        "dev" => Ok(DEV_MANIFEST),
        "test" => Ok(TEST_MANIFEST),
        _ => Err(Error::Config(format!("unknown split `{split}` (expected dev or test)"))),
    }
}

/// Hypothesis and reference files produced by [`cmd_decode`].
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub hypotheses: PathBuf,
    pub references: PathBuf,
    pub lines: Vec<String>,
}

/// Decodes one split of the data directory with a checkpoint and writes
/// `hyp.<task>.<split>.txt` plus the matching `ref.<task>.<split>.txt`.
pub fn cmd_decode(cfg: &RunConfig, checkpoint: &Path, task: Task, split: &str) -> Result<DecodeOutput> {
    let out = cfg.require_out()?;
    let data_dir = cfg.require_data()?;
    let manifest = manifest_for(split)?;
    let vocab = Vocabulary::load(&data_dir.join(VOCAB_FILE))?;
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let triples = read_manifest(&data_dir.join(manifest))?;
    let mut dataset = TaskDataset::project(&triples, if task == Task::MtExt { Task::Mt } else { task })?;
    dataset.task = task;
    let lines = translate(&model, &vocab, &dataset, &cfg.decode)?;
    let refs: Vec<String> = dataset.items.iter().map(|i| i.target.join(" ")).collect();
    create_dir(out)?;
    let stem = format!("{}.{split}.txt", task.name().to_ascii_lowercase());
    let hypotheses = out.join(format!("hyp.{stem}"));
    let references = out.join(format!("ref.{stem}"));
    write_lines(&hypotheses, &lines)?;
    write_lines(&references, &refs)?;
    cfg.write_resolved(out)?;
    println!("wrote {} hypotheses to {}", lines.len(), hypotheses.display());
    Ok(DecodeOutput {
        hypotheses,
        references,
        lines,
    })
}

/// WER for ASR, BLEU for everything else.
pub fn score_lines(task: Task, hyps: &[String], refs: &[String]) -> Result<ScoreReport> {
    if task == Task::Asr {
        wer(hyps, refs)
    } else {
        corpus_bleu(hyps, refs)
    }
}

/// Scores a hypothesis file against a reference file. With an output
/// directory the report is also written as `score.csv`.
pub fn cmd_score(hyp: &Path, reference: &Path, task: Task, out: Option<&Path>) -> Result<ScoreReport> {
    let hyps = read_lines(hyp)?;
    let refs = read_lines(reference)?;
    let report = score_lines(task, &hyps, &refs)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        emit_report(std::slice::from_ref(&report), &dir.join("score.csv"))?;
    }
    println!("{} = {:.4} ({} sentences)", report.metric, report.value, report.n_sentences);
    Ok(report)
}

/// Averages the `k` newest checkpoints (by step) among `inputs`, which may
/// be checkpoint files or directories of `checkpoint_<step>.xst` files.
/// Fewer than `k` available means all of them are used, with a warning.
pub fn cmd_average(inputs: &[PathBuf], k: usize, out: &Path) -> Result<Checkpoint> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let mut found = Vec::new();
    for p in inputs {
        if p.is_dir() {
            found.extend(list_checkpoints(p)?.into_iter().map(|(_, path)| path));
        } else {
            found.push(p.clone());
        }
    }
    let mut ckpts = found.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    if ckpts.is_empty() {
        return Err(Error::Config("no checkpoints to average".into()));
    }
    ckpts.sort_by_key(|c| c.step);
    if ckpts.len() < k {
        warn!("only {} checkpoints available, averaging all of them (k = {k})", ckpts.len());
    }
    let newest = &ckpts[ckpts.len().saturating_sub(k)..];
    let avg = average_checkpoints(newest)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    avg.save(out)?;
    println!("averaged {} checkpoints (steps {}..={}) into {}", newest.len(), newest[0].step, avg.step, out.display());
    Ok(avg)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub recipe: String,
    pub seed: u64,
    pub test_st_bleu: f64,
    pub dev_mt_bleu: f64,
    pub dev_asr_wer: f64,
}

/// Per-recipe means over seeds, in the order recipes first appear.
pub fn ablation_means(rows: &[AblationRow]) -> Vec<(String, [f64; 3])> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.recipe) {
            order.push(r.recipe.clone());
        }
    }
    order
        .into_iter()
        .map(|name| {
            let rs: Vec<&AblationRow> = rows.iter().filter(|r| r.recipe == name).collect();
            let n = rs.len() as f64;
            let mean = |f: fn(&AblationRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let m = [mean(|r| r.test_st_bleu), mean(|r| r.dev_mt_bleu), mean(|r| r.dev_asr_wer)];
            (name, m)
        })
        .collect()
}

/// Ablation CSV: one row per (recipe, seed), then one `mean` row per recipe.
pub fn ablation_csv(rows: &[AblationRow], with_means: bool) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.4},{:.4}",
            r.recipe, r.seed, r.test_st_bleu, r.dev_mt_bleu, r.dev_asr_wer
        );
    }
    if with_means {
        for (name, m) in ablation_means(rows) {
            let _ = writeln!(s, "{name},mean,{:.4},{:.4},{:.4}", m[0], m[1], m[2]);
        }
    }
    s
}

/// Evaluates a trained recipe the way the ablation table reports it.
pub fn ablation_row(recipe: &str, seed: u64, outcome: &RecipeOutcome, data: &TrainData, cfg: &RunConfig) -> Result<AblationRow> {
    let m = &outcome.averaged_model;
    Ok(AblationRow {
        recipe: recipe.to_string(),
        seed,
        test_st_bleu: evaluate(m, data, Task::St, Split::Test, &cfg.decode)?.value,
        dev_mt_bleu: evaluate(m, data, Task::Mt, Split::Dev, &cfg.decode)?.value,
        dev_asr_wer: evaluate(m, data, Task::Asr, Split::Dev, &cfg.decode)?.value,
    })
}

/// Dev ST BLEU of the final stage, indexed by steps into that stage.
pub fn convergence_rows(outcome: &RecipeOutcome) -> Vec<(usize, usize, f64)> {
    let Some(last) = outcome.stages.last() else {
        return Vec::new();
    };
    let start = outcome.log.stage_start(&last.name).unwrap_or(0);
    outcome
        .log
        .rows
        .iter()
        .filter(|r| r.stage == last.name)
        .filter_map(|r| match r.dev {
            Some((DevMetric::StBleu, v)) => Some((r.step - start, r.step, v)),
            _ => None,
        })
        .collect()
}

/// Runs every ablation recipe for every seed. Each run trains into
/// `<out>/<recipe>/seed<seed>`; `ablation.csv` is rewritten after every
/// completed run. With `convergence` set, the dev curves of `exp1` and
/// `exp3` are joined into `convergence.csv`.
pub fn cmd_ablate(cfg: &RunConfig, convergence: bool) -> Result<Vec<AblationRow>> {
    let out = cfg.require_out()?;
    let (data, fd) = train_data(cfg)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let csv_path = out.join("ablation.csv");
    let mut rows = Vec::new();
    let mut conv = String::from(CONVERGENCE_HEADER);
    conv.push('\n');
    let seeds = cfg.ablation_seeds();
    for name in cfg.ablation_recipes() {
        let recipe = TrainingRecipe::preset(&name)?;
        for &seed in &seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.train.seed = seed;
            let dir = out.join(&recipe.name).join(format!("seed{seed}"));
            let outcome = run_one(&run_cfg, &data, fd, &recipe, &dir)?;
            let row = ablation_row(&recipe.name, seed, &outcome, &data, &run_cfg)?;
            println!(
                "{} seed {}: test ST BLEU {:.2}, dev MT BLEU {:.2}, dev WER {:.4}",
                row.recipe, seed, row.test_st_bleu, row.dev_mt_bleu, row.dev_asr_wer
            );
            rows.push(row);
            write_file(&csv_path, &ablation_csv(&rows, false))?;
            if convergence && (recipe.name == "exp1" || recipe.name == "exp3") {
                for (stage_step, step, v) in convergence_rows(&outcome) {
                    let _ = writeln!(conv, "{},{seed},{stage_step},{step},{v:.4}", recipe.name);
                }
            }
        }
    }
    write_file(&csv_path, &ablation_csv(&rows, true))?;
    if convergence {
        write_file(&out.join("convergence.csv"), &conv)?;
    }
    Ok(rows)
}

/// One row of the external-data sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ext_size: usize,
    pub mt_bleu: f64,
    pub st_bleu: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4}", r.ext_size, r.mt_bleu, r.st_bleu);
    }
    s
}

/// Trains the configured recipe once per external-corpus size. The triples
/// are the same for every size; only the external pairs change. `mt_bleu`
/// is dev MT BLEU right after the pre-training stage (of the final model
/// when the recipe has none); `st_bleu` is test ST BLEU of the averaged
/// model. Size 0 drops MT_EXT from the recipe.
pub fn cmd_sweep_ext(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let out = cfg.require_out()?;
    if cfg.ext_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sweep sizes must be strictly ascending".into()));
    }
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let base = cfg.training_recipe()?;
    let mut rows = Vec::new();
    for &size in &cfg.ext_sizes {
        let spec = crate::data::SynthSpec {
            n_ext_pairs: size,
            ..cfg.corpus.clone()
        };
        let (corpus, _) = generate_corpus(&spec)?;
        let vocab = build_vocab(&corpus);
        let fd = frame_dim(&corpus)?;
        let data = TrainData::from_corpus(&corpus, vocab)?;
        let recipe = if size == 0 { base.without(Task::MtExt) } else { base.clone() };
        let outcome = run_one(cfg, &data, fd, &recipe, &out.join(format!("ext{size}")))?;
        let pretrained = if recipe.stages.len() > 1 { &outcome.stage_models[0] } else { &outcome.averaged_model };
        let row = SweepRow {
            ext_size: size,
            mt_bleu: evaluate(pretrained, &data, Task::Mt, Split::Dev, &cfg.decode)?.value,
            st_bleu: evaluate(&outcome.averaged_model, &data, Task::St, Split::Test, &cfg.decode)?.value,
        };
        println!("ext {}: MT BLEU {:.2}, ST BLEU {:.2}", size, row.mt_bleu, row.st_bleu);
        rows.push(row);
        write_file(&out.join("sweep_ext.csv"), &sweep_csv(&rows))?;
    }
    Ok(rows)
}
