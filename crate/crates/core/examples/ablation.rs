//! Runs the recipe ablation on a reduced budget and writes `ablation.csv`
//! and `convergence.csv`. The built-in config trains four recipes once
//! each (about eight minutes on one core). Pass a config file for every
//! preset, several seeds or full budgets.
//!
//!     cargo run --release --example ablation -- [config] [out_dir]

use std::path::{Path, PathBuf};

use xstnet::cli::{cmd_ablate, cmd_gen_data, RunConfig};

const QUICK: &str = "\
corpus.n_ext_pairs = 5000
corpus.n_dev = 100
corpus.n_test = 100
train.pretrain_steps = 500
train.finetune_steps = 1500
train.eval_interval = 250
train.avg_k = 2
train.keep_checkpoints = 2
ablate.recipes = exp1,exp3,xstnet-base,w-transf
ablate.seeds = 1
decode.beam = 1
";

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = match args.next() {
        Some(p) => RunConfig::from_file(Path::new(&p))?,
        None => RunConfig::parse_str(QUICK, Path::new("<built-in>"))?,
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xst-ablation"));

    let data_dir = out.join("data");
    cfg.out_dir = Some(data_dir.clone());
    cmd_gen_data(&cfg)?;
    cfg.data_dir = Some(data_dir);
    cfg.out_dir = Some(out.clone());
    cmd_ablate(&cfg, true)?;

    print!("{}", std::fs::read_to_string(out.join("ablation.csv"))?);
    println!("convergence curves in {}", out.join("convergence.csv").display());
    Ok(())
}
