use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{average_checkpoints, checkpoint_file_name, list_checkpoints, Checkpoint};
use super::optim::{adam_step, sample_task, AdamState};
use super::recipe::{DevMetric, Stage, TrainingRecipe};
use crate::data::{make_batches, BatchStream, Corpus, Task, TaskDataset, Vocabulary};
use crate::error::{Error, Result};
use crate::infer::{translate, DecodeOptions};
use crate::metrics::{corpus_bleu, wer, ScoreReport};
use crate::model::{ModelConfig, ParamStore, XstNetModel};

/// Derives independent stream seeds from the run seed.
pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Dev,
    Test,
}

/// Vocabulary plus per-task train/dev/test datasets. MT_EXT has no held-out
/// split of its own; its dev and test sets are the in-domain MT pairs.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub vocab: Arc<Vocabulary>,
    train: BTreeMap<Task, Arc<TaskDataset>>,
    dev: BTreeMap<Task, Arc<TaskDataset>>,
    test: BTreeMap<Task, Arc<TaskDataset>>,
}

impl TrainData {
    pub fn from_corpus(corpus: &Corpus, vocab: Vocabulary) -> Result<Self> {
        let mut train = BTreeMap::new();
        let mut dev = BTreeMap::new();
        let mut test = BTreeMap::new();
        for task in Task::ALL {
            train.insert(task, Arc::new(corpus.dataset(task)?));
            let held = if task == Task::MtExt { Task::Mt } else { task };
            let mut d = TaskDataset::project(&corpus.dev, held)?;
            let mut t = TaskDataset::project(&corpus.test, held)?;
            d.task = task;
            t.task = task;
            dev.insert(task, Arc::new(d));
            test.insert(task, Arc::new(t));
        }
        Ok(TrainData {
            vocab: Arc::new(vocab),
            train,
            dev,
            test,
        })
    }

    pub fn train(&self, task: Task) -> &Arc<TaskDataset> {
        &self.train[&task]
    }

    pub fn held_out(&self, task: Task, split: Split) -> &Arc<TaskDataset> {
        match split {
            Split::Dev => &self.dev[&task],
            Split::Test => &self.test[&task],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub base_lr: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub eval_interval: usize,
    /// Evaluations without dev improvement before a stage stops.
    pub patience: usize,
    /// Trailing checkpoints averaged into the final model.
    pub avg_k: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    /// Dev examples used per evaluation; 0 means all.
    pub dev_size: usize,
    /// Cap on steps summed over all stages.
    pub max_total_steps: Option<usize>,
    /// Checkpoint files kept on disk (newest first); 0 keeps all.
    pub keep_checkpoints: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 1,
            base_lr: 2e-3,
            warmup: 400,
            batch_size: 32,
            label_smoothing: 0.1,
            eval_interval: 200,
            patience: 5,
            avg_k: 10,
            pretrain_steps: 1000,
            finetune_steps: 4000,
            dev_size: 0,
            max_total_steps: None,
            keep_checkpoints: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 || self.avg_k == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, eval_interval, avg_k and patience must be >= 1".into(),
            ));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("base_lr must be > 0 and label_smoothing in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: String,
    pub task: Task,
    pub loss: f64,
    /// Filled on evaluation steps.
    pub dev: Option<(DevMetric, f64)>,
}

/// Training log with one row per optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<LogRow>,
}

pub const METRICS_HEADER: &str = "step,stage,task,loss,dev_metric_name,dev_metric_value";

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(48 * (self.rows.len() + 1));
        s.push_str(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let (name, value) = match r.dev {
                Some((m, v)) => (m.name(), format!("{v:.4}")),
                None => ("", String::new()),
            };
            let _ = writeln!(s, "{},{},{},{:.6},{},{}", r.step, r.stage, r.task, r.loss, name, value);
        }
        s
    }

    /// `(global step, value)` of every evaluation in `stage`.
    pub fn dev_curve(&self, stage: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.stage == stage)
            .filter_map(|r| r.dev.map(|(_, v)| (r.step, v)))
            .collect()
    }

    /// Global step at which `stage` began (its first row minus one).
    pub fn stage_start(&self, stage: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.stage == stage).map(|r| r.step - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub name: String,
    pub steps: usize,
    pub stopped_early: bool,
    /// Batches drawn per task.
    pub task_counts: BTreeMap<Task, usize>,
    /// Best `(global step, value)` of the stage's dev metric.
    pub best: Option<(usize, f64)>,
    pub metric: DevMetric,
}

#[derive(Clone, Debug)]
pub struct RecipeOutcome {
    pub final_model: XstNetModel<f32>,
    /// Mean of the last `avg_k` evaluation checkpoints of the final stage.
    pub averaged_model: XstNetModel<f32>,
    pub best_model: Option<XstNetModel<f32>>,
    pub log: MetricsLog,
    pub stages: Vec<StageReport>,
    /// Parameters as they stood when each stage finished.
    pub stage_models: Vec<XstNetModel<f32>>,
}

/// Runs the stages of a recipe one after another on a single model.
pub struct Trainer<'d> {
    data: &'d TrainData,
    opts: TrainOptions,
    model: XstNetModel<f32>,
    log: MetricsLog,
    step: usize,
    out_dir: Option<PathBuf>,
    provenance: String,
    window: VecDeque<(usize, ParamStore<f32>)>,
    best_params: Option<ParamStore<f32>>,
    n_stages_run: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d TrainData, model: XstNetModel<f32>, opts: TrainOptions) -> Result<Self> {
        opts.validate()?;
        if model.config().vocab_size != data.vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match vocabulary of {}",
                model.config().vocab_size,
                data.vocab.len()
            )));
        }
        Ok(Trainer {
            data,
            opts,
            model,
            log: MetricsLog::default(),
            step: 0,
            out_dir: None,
            provenance: String::new(),
            window: VecDeque::new(),
            best_params: None,
            n_stages_run: 0,
        })
    }

    /// Writes a checkpoint file at every evaluation into `dir`.
    pub fn with_output(mut self, dir: &Path, recipe: &str) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self.provenance = recipe.to_string();
        self
    }

    pub fn model(&self) -> &XstNetModel<f32> {
        &self.model
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn global_step(&self) -> usize {
        self.step
    }

    /// MT pre-training on the external corpus only; the acoustic branch
    /// never sees a batch so its parameters stay bit-identical.
    pub fn pretrain_mt(&mut self, stage: &Stage, max_steps: usize) -> Result<StageReport> {
        if stage.task_set() != [Task::MtExt] {
            return Err(Error::Config(format!(
                "pre-training stage `{}` must use MT_EXT only, got {}",
                stage.name, stage
            )));
        }
        self.run_stage(stage, max_steps)
    }

    /// Multi-task loop: sample a task, draw its next batch, take one step.
    pub fn finetune_multitask(&mut self, stage: &Stage, max_steps: usize) -> Result<StageReport> {
        self.run_stage(stage, max_steps)
    }

    fn run_stage(&mut self, stage: &Stage, max_steps: usize) -> Result<StageReport> {
        stage.validate()?;
        let idx = self.n_stages_run as u64;
        self.n_stages_run += 1;
        let o = self.opts.clone();
        let mut streams = BTreeMap::new();
        for task in stage.task_set() {
            let ds = self.data.train(task).clone();
            if ds.is_empty() {
                return Err(Error::Config(format!("stage `{}` needs {task} data but none is loaded", stage.name)));
            }
            let s = BatchStream::new(ds, self.data.vocab.clone(), o.batch_size, mix(o.seed, idx, task.index() as u64))?;
            streams.insert(task, s);
        }
        let mut task_rng = ChaCha8Rng::seed_from_u64(mix(o.seed, 1000 + idx, 0));
        let mut adam = AdamState::new(o.base_lr, o.warmup);
        let metric = stage.dev_metric();
        let mut report = StageReport {
            name: stage.name.clone(),
            steps: 0,
            stopped_early: false,
            task_counts: stage.task_set().into_iter().map(|t| (t, 0)).collect(),
            best: None,
            metric,
        };
        self.window.clear();
        self.best_params = None;
        let mut bad_evals = 0;
        for s in 1..=max_steps {
            let task = sample_task(&stage.tasks, &mut task_rng)?;
            let batch = streams.get_mut(&task).expect("stream per task").next_batch()?;
            if batch.task != task {
                return Err(Error::invalid("train", format!("sampled {task} but drew a {} batch", batch.task)));
            }
            *report.task_counts.get_mut(&task).unwrap() += 1;
            self.step += 1;
            let (loss, grads) = {
                let mut sess = self.model.train_session(Some(mix(o.seed, 2000, self.step as u64)));
                let l = sess.forward_loss(&batch, o.label_smoothing)?;
                let value = sess.graph.value(l).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged { step: self.step, loss: value });
                }
                (value, sess.backward(l)?)
            };
            adam_step(self.model.params_mut(), grads, &mut adam)?;
            report.steps = s;
            let mut row = LogRow {
                step: self.step,
                stage: stage.name.clone(),
                task,
                loss,
                dev: None,
            };
            if s % o.eval_interval == 0 || s == max_steps {
                let value = self.dev_metric(stage, metric)?;
                log::info!("step {} [{}] {} = {value:.4}", self.step, stage.name, metric.name());
                row.dev = Some((metric, value));
                self.snapshot()?;
                match report.best {
                    Some((_, b)) if !metric.better(value, b) => bad_evals += 1,
                    _ => {
                        report.best = Some((self.step, value));
                        self.best_params = Some(self.model.params().clone());
                        bad_evals = 0;
                    }
                }
            }
            self.log.rows.push(row);
            if bad_evals >= o.patience {
                report.stopped_early = true;
                break;
            }
        }
        Ok(report)
    }

    fn snapshot(&mut self) -> Result<()> {
        if self.window.len() == self.opts.avg_k {
            self.window.pop_front();
        }
        self.window.push_back((self.step, self.model.params().clone()));
        if let Some(dir) = &self.out_dir {
            let meta = vec![("recipe".to_string(), self.provenance.clone())];
            Checkpoint::from_model(&self.model, self.step, meta).save(&dir.join(checkpoint_file_name(self.step)))?;
            let keep = self.opts.keep_checkpoints;
            if keep > 0 {
                let files = list_checkpoints(dir)?;
                for (_, old) in &files[..files.len().saturating_sub(keep)] {
                    std::fs::remove_file(old).map_err(|e| Error::io(old, e))?;
                }
            }
        }
        Ok(())
    }

    fn dev_metric(&self, stage: &Stage, metric: DevMetric) -> Result<f64> {
        match metric {
            DevMetric::StBleu => {
                let dev = subset(self.data.held_out(Task::St, Split::Dev), self.opts.dev_size);
                Ok(score_task(&self.model, &self.data.vocab, &dev, &DecodeOptions::greedy())?.value)
            }
            DevMetric::Loss => {
                let tasks = stage.task_set();
                let mut total = 0.0;
                for &t in &tasks {
                    let dev = subset(self.data.held_out(t, Split::Dev), self.opts.dev_size);
                    total += dataset_loss(&self.model, &self.data.vocab, &dev)?;
                }
                Ok(total / tasks.len() as f64)
            }
        }
    }

    /// Averages the trailing window (or returns the current model when no
    /// evaluation has happened).
    pub fn averaged(&self) -> Result<XstNetModel<f32>> {
        if self.window.is_empty() {
            return Ok(self.model.clone());
        }
        let ckpts: Vec<Checkpoint> = self
            .window
            .iter()
            .map(|(step, p)| Checkpoint {
                step: *step,
                config: self.model.config().clone(),
                metadata: Vec::new(),
                params: p.clone(),
            })
            .collect();
        average_checkpoints(&ckpts)?.to_model()
    }
}

fn subset(ds: &TaskDataset, n: usize) -> TaskDataset {
    if n == 0 || n >= ds.len() {
        return ds.clone();
    }
    TaskDataset {
        task: ds.task,
        items: ds.items[..n].to_vec(),
    }
}

/// Token-weighted mean NLL (no smoothing) of `model` on `ds`.
pub fn dataset_loss(model: &XstNetModel<f32>, vocab: &Vocabulary, ds: &TaskDataset) -> Result<f64> {
    let mut sum = 0.0;
    let mut tokens = 0usize;
    for b in make_batches(ds, vocab, 64, 0)? {
        let mut s = model.eval_session();
        let l = s.forward_loss(&b, 0.0)?;
        let n = b.n_target_tokens();
        sum += s.graph.value(l).item() as f64 * n as f64;
        tokens += n;
    }
    Ok(if tokens == 0 { 0.0 } else { sum / tokens as f64 })
}

/// Decodes `ds` and scores it: WER for ASR, BLEU otherwise.
pub fn score_task(model: &XstNetModel<f32>, vocab: &Vocabulary, ds: &TaskDataset, opts: &DecodeOptions) -> Result<ScoreReport> {
    let hyps = translate(model, vocab, ds, opts)?;
    let refs: Vec<String> = ds.items.iter().map(|i| i.target.join(" ")).collect();
    if ds.task == Task::Asr {
        wer(&hyps, &refs)
    } else {
        corpus_bleu(&hyps, &refs)
    }
}

/// Scores `model` on a held-out split of `task`.
pub fn evaluate(
    model: &XstNetModel<f32>,
    data: &TrainData,
    task: Task,
    split: Split,
    opts: &DecodeOptions,
) -> Result<ScoreReport> {
    score_task(model, &data.vocab, data.held_out(task, split), opts)
}

/// Runs every stage of `recipe` in order, carrying parameters forward. The
/// final stage's trailing checkpoints are averaged into the reported model;
/// the best-dev checkpoint of that stage is returned alongside. When
/// `out_dir` is given, checkpoints, `metrics.csv`, `average.xst`,
/// `best.xst` and `last.xst` are written there.
pub fn run_recipe(
    recipe: &TrainingRecipe,
    data: &TrainData,
    config: &ModelConfig,
    opts: &TrainOptions,
    out_dir: Option<&Path>,
) -> Result<RecipeOutcome> {
    recipe.validate()?;
    let model = XstNetModel::new(config.clone(), opts.seed)?;
    let mut trainer = Trainer::new(data, model, opts.clone())?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        trainer = trainer.with_output(dir, &recipe.name);
    }
    let n = recipe.stages.len();
    let mut stages = Vec::with_capacity(n);
    let mut stage_models = Vec::with_capacity(n);
    for (i, stage) in recipe.stages.iter().enumerate() {
        let budget = stage
            .max_steps
            .unwrap_or(if i + 1 == n { opts.finetune_steps } else { opts.pretrain_steps });
        let used = trainer.global_step();
        let budget = opts.max_total_steps.map_or(budget, |cap| budget.min(cap.saturating_sub(used)));
        let report = if stage.task_set() == [Task::MtExt] {
            trainer.pretrain_mt(stage, budget)?
        } else {
            trainer.finetune_multitask(stage, budget)?
        };
        stages.push(report);
        stage_models.push(trainer.model().clone());
    }
    let averaged_model = trainer.averaged()?;
    let best_model = match &trainer.best_params {
        Some(p) => Some(XstNetModel::from_params(config.clone(), p.clone())?),
        None => None,
    };
    if let Some(dir) = out_dir {
        let meta = |kind: &str| vec![("recipe".to_string(), recipe.name.clone()), ("kind".to_string(), kind.to_string())];
        let step = trainer.global_step();
        if step == 0 {
            Checkpoint::from_model(trainer.model(), 0, meta("initial")).save(&dir.join(checkpoint_file_name(0)))?;
        }
        Checkpoint::from_model(&averaged_model, step, meta("average")).save(&dir.join("average.xst"))?;
        Checkpoint::from_model(trainer.model(), step, meta("last")).save(&dir.join("last.xst"))?;
        if let Some(b) = &best_model {
            Checkpoint::from_model(b, step, meta("best")).save(&dir.join("best.xst"))?;
        }
        let path = dir.join("metrics.csv");
        std::fs::write(&path, trainer.log().to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(RecipeOutcome {
        final_model: trainer.model().clone(),
        averaged_model,
        best_model,
        log: trainer.log,
        stages,
        stage_models,
    })
}
