use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use xstnet::cli::{self, RunConfig};
use xstnet::data::Task;

#[derive(Parser)]
#[command(name = "xstnet", version, about = "Speech translation with a shared speech/text Transformer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Corpus seed for gen-data, training seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory written by gen-data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Beam size; 1 is greedy.
    #[arg(long, global = true)]
    beam: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, manifests and vocabulary.
    GenData,
    /// Train one recipe.
    Train {
        #[arg(long)]
        recipe: Option<String>,
        /// Inline stage such as `ST,ASR,MT:3000`; repeat for more stages.
        #[arg(long)]
        stage: Vec<String>,
        /// Cap on total optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Decode a split with a checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "ST")]
        task: Task,
        #[arg(long, default_value = "test")]
        split: String,
        /// Same as `--beam 1`.
        #[arg(long)]
        greedy: bool,
    },
    /// Score hypotheses against references (WER for ASR, BLEU otherwise).
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = "ST")]
        task: Task,
    },
    /// Average the newest checkpoints into `<out>/average.xst`.
    Average {
        /// Checkpoint files or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
    },
    /// Run the recipe ablation over several seeds.
    Ablate {
        /// Comma-separated recipe names; default is every preset.
        #[arg(long)]
        recipes: Option<String>,
        /// Comma-separated seeds; default is three seeds from `--seed`.
        #[arg(long)]
        seeds: Option<String>,
        /// Also write the exp1/exp3 dev curves to `convergence.csv`.
        #[arg(long)]
        convergence_report: bool,
    },
    /// Train one recipe per external-corpus size.
    SweepExt {
        /// Comma-separated ascending sizes.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        recipe: Option<String>,
    },
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for s in &common.sets {
        let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        let key = if matches!(command, Command::GenData) { "corpus.seed" } else { "train.seed" };
        cfg.set(key, &seed.to_string())?;
    }
    if let Some(d) = &common.out {
        cfg.out_dir = Some(d.clone());
    }
    if let Some(d) = &common.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(b) = common.beam {
        cfg.set("decode.beam", &b.to_string())?;
    }
    match command {
        Command::Train { recipe, stage, max_steps } => {
            if let Some(r) = recipe {
                cfg.set("recipe", r)?;
            }
            if !stage.is_empty() {
                cfg.stages = stage.clone();
            }
            if let Some(n) = max_steps {
                cfg.set("train.max_steps", &n.to_string())?;
            }
            cfg.training_recipe()?;
        }
        Command::Decode { greedy: true, .. } => cfg.set("decode.beam", "1")?,
        Command::Ablate { recipes, seeds, .. } => {
            if let Some(r) = recipes {
                cfg.set("ablate.recipes", r)?;
            }
            if let Some(s) = seeds {
                cfg.set("ablate.seeds", s)?;
            }
        }
        Command::SweepExt { sizes, recipe } => {
            if let Some(s) = sizes {
                cfg.set("sweep.sizes", s)?;
            }
            if let Some(r) = recipe {
                cfg.set("recipe", r)?;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cfg: &RunConfig, command: Command) -> Result<()> {
    match command {
        Command::GenData => {
            cli::cmd_gen_data(cfg)?;
        }
        Command::Train { .. } => {
            cli::cmd_train(cfg)?;
        }
        Command::Decode { checkpoint, task, split, .. } => {
            cli::cmd_decode(cfg, &checkpoint, task, &split)?;
        }
        Command::Score { hyp, reference, task } => {
            cli::cmd_score(&hyp, &reference, task, cfg.out_dir.as_deref())?;
        }
        Command::Average { inputs, k } => {
            let out = cfg.require_out()?.join("average.xst");
            cli::cmd_average(&inputs, k, &out)?;
        }
        Command::Ablate { convergence_report, .. } => {
            cli::cmd_ablate(cfg, convergence_report)?;
        }
        Command::SweepExt { .. } => {
            cli::cmd_sweep_ext(cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let cfg = match resolve(&cli.common, &cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match run(&cfg, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
