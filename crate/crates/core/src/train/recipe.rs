use std::fmt;

use crate::data::Task;
use crate::error::{Error, Result};

/// One phase of a recipe: a weighted task mix trained until its step budget
/// runs out or the dev metric stops improving.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: String,
    pub tasks: Vec<(Task, f64)>,
    /// `None` takes the budget from the run options: the last stage of a
    /// recipe gets the fine-tune budget, earlier stages the pre-train one.
    pub max_steps: Option<usize>,
}

/// What a stage is judged by on the dev set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DevMetric {
    /// Greedy-decoded ST BLEU; higher is better.
    StBleu,
    /// Token-level NLL averaged over the stage's tasks; lower is better.
    Loss,
}

impl DevMetric {
    pub fn name(self) -> &'static str {
        match self {
            DevMetric::StBleu => "dev_st_bleu",
            DevMetric::Loss => "dev_loss",
        }
    }

    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            DevMetric::StBleu => a > b,
            DevMetric::Loss => a < b,
        }
    }
}

impl Stage {
    pub fn uniform(name: &str, tasks: &[Task]) -> Self {
        Stage {
            name: name.into(),
            tasks: tasks.iter().map(|&t| (t, 1.0)).collect(),
            max_steps: None,
        }
    }

    pub fn task_set(&self) -> Vec<Task> {
        let mut t: Vec<Task> = self.tasks.iter().map(|x| x.0).collect();
        t.sort();
        t.dedup();
        t
    }

    pub fn has(&self, task: Task) -> bool {
        self.tasks.iter().any(|t| t.0 == task)
    }

    pub fn dev_metric(&self) -> DevMetric {
        if self.has(Task::St) {
            DevMetric::StBleu
        } else {
            DevMetric::Loss
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config(format!("stage `{}` has no tasks", self.name)));
        }
        if self.tasks.iter().any(|t| !(t.1 > 0.0 && t.1.is_finite())) {
            return Err(Error::Config(format!("stage `{}` has a non-positive weight", self.name)));
        }
        Ok(())
    }

    /// Parses `TASK[=W],TASK[=W]...[:STEPS]`, e.g. `ST,ASR=2,MT:3000`.
    pub fn parse(name: &str, s: &str) -> Result<Self> {
        let (list, steps) = match s.rsplit_once(':') {
            Some((l, n)) => (
                l,
                Some(n.trim().parse().map_err(|_| Error::Config(format!("bad step count in stage `{s}`")))?),
            ),
            None => (s, None),
        };
        let mut tasks = Vec::new();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (t, w) = match part.split_once('=') {
                Some((t, w)) => (t, w.parse().map_err(|_| Error::Config(format!("bad weight in `{part}`")))?),
                None => (part, 1.0),
            };
            tasks.push((t.parse::<Task>()?, w));
        }
        let stage = Stage {
            name: name.into(),
            tasks,
            max_steps: steps,
        };
        stage.validate()?;
        Ok(stage)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .tasks
            .iter()
            .map(|(t, w)| if *w == 1.0 { t.to_string() } else { format!("{t}={w}") })
            .collect();
        write!(f, "{}", parts.join(","))?;
        if let Some(n) = self.max_steps {
            write!(f, ":{n}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRecipe {
    pub name: String,
    pub stages: Vec<Stage>,
}

/// Preset names accepted by [`TrainingRecipe::preset`], ablation order.
pub const PRESETS: [&str; 8] = ["exp1", "exp2", "exp3", "exp4", "exp5", "exp6", "xstnet-base", "w-transf"];

impl TrainingRecipe {
    pub fn new(name: &str, stages: Vec<Stage>) -> Self {
        TrainingRecipe {
            name: name.into(),
            stages,
        }
    }

    /// Table of strategies: `exp1`..`exp6`, `xstnet-base`, `w-transf`.
    /// Upper-case `EXP_I`-style names are accepted too.
    pub fn preset(name: &str) -> Result<Self> {
        use Task::*;
        let key = match name.to_ascii_lowercase().replace('_', "-").as_str() {
            "exp1" | "exp-i" => "exp1",
            "exp2" | "exp-ii" => "exp2",
            "exp3" | "exp-iii" => "exp3",
            "exp4" | "exp-iv" => "exp4",
            "exp5" | "exp-v" => "exp5",
            "exp6" | "exp-vi" => "exp6",
            "xstnet-base" | "base" => "xstnet-base",
            "w-transf" | "wtransf" => "w-transf",
            _ => return Err(Error::Config(format!("unknown recipe `{name}`"))),
        };
        let pre = |tasks: &[Task]| Stage::uniform("pretrain", tasks);
        let mid = |tasks: &[Task]| Stage::uniform("pretrain2", tasks);
        let fine = |tasks: &[Task]| Stage::uniform("finetune", tasks);
        let stages = match key {
            "exp1" => vec![pre(&[MtExt]), fine(&[St, Asr, Mt, MtExt])],
            "exp2" => vec![pre(&[MtExt]), fine(&[St, Asr, Mt])],
            "exp3" => vec![fine(&[St, Asr, Mt, MtExt])],
            "exp4" => vec![pre(&[MtExt]), mid(&[Asr, Mt, MtExt]), fine(&[St])],
            "exp5" => vec![pre(&[MtExt]), mid(&[Asr, Mt]), fine(&[St])],
            "exp6" => vec![pre(&[MtExt, Mt]), mid(&[Asr]), fine(&[St])],
            "xstnet-base" => vec![fine(&[St, Asr, Mt])],
            _ => vec![fine(&[St])],
        };
        Ok(TrainingRecipe::new(key, stages))
    }

    /// Builds a recipe from `--stage` specs in order.
    pub fn from_specs(name: &str, specs: &[String]) -> Result<Self> {
        let n = specs.len();
        let stages = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let label = if i + 1 == n { "finetune".to_string() } else { format!("stage{}", i + 1) };
                Stage::parse(&label, s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingRecipe::new(name, stages))
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.iter().try_for_each(Stage::validate)
    }

    /// Same recipe with `task` removed from every stage; stages left empty
    /// are dropped.
    pub fn without(&self, task: Task) -> Self {
        let stages = self
            .stages
            .iter()
            .map(|s| Stage {
                tasks: s.tasks.iter().copied().filter(|t| t.0 != task).collect(),
                ..s.clone()
            })
            .filter(|s| !s.tasks.is_empty())
            .collect();
        TrainingRecipe::new(&self.name, stages)
    }

    /// Whether any stage trains on `task`.
    pub fn uses(&self, task: Task) -> bool {
        self.stages.iter().any(|s| s.has(task))
    }
}
