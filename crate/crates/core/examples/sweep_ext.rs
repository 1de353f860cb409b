//! Trains the progressive recipe once per external-MT corpus size and
//! prints `ext_size,mt_bleu,st_bleu`. The default sizes and budgets are
//! scaled down; `sweep.sizes = 2000,5000,10000,20000` with full budgets
//! reproduces the full sweep.
//!
//!     cargo run --release --example sweep_ext -- [config] [out_dir]

use std::path::{Path, PathBuf};

use xstnet::cli::{cmd_sweep_ext, RunConfig};

const QUICK: &str = "\
corpus.n_dev = 100
corpus.n_test = 100
train.pretrain_steps = 500
train.finetune_steps = 1500
train.eval_interval = 250
train.avg_k = 2
train.keep_checkpoints = 2
decode.beam = 1
sweep.sizes = 0,1000,5000
";

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = match args.next() {
        Some(p) => RunConfig::from_file(Path::new(&p))?,
        None => RunConfig::parse_str(QUICK, Path::new("<built-in>"))?,
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xst-sweep"));
    cfg.out_dir = Some(out.clone());
    cmd_sweep_ext(&cfg)?;
    print!("{}", std::fs::read_to_string(out.join("sweep_ext.csv"))?);
    Ok(())
}
