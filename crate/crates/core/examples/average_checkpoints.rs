//! Trains briefly with a checkpoint written at every evaluation, then
//! averages the newest k of them and compares dev loss against the last
//! single checkpoint.
//!
//!     cargo run --release --example average_checkpoints

use xstnet::cli::cmd_average;
use xstnet::data::{build_vocab, generate_corpus, SynthSpec, Task};
use xstnet::model::ModelConfig;
use xstnet::train::{dataset_loss, list_checkpoints, run_recipe, Checkpoint, Split, TrainData, TrainOptions, TrainingRecipe};

fn main() -> anyhow::Result<()> {
    let dir = tempfile_dir()?;
    let spec = SynthSpec {
        n_triples: 300,
        n_ext_pairs: 2000,
        ..SynthSpec::default()
    };
    let (corpus, _) = generate_corpus(&spec)?;
    let data = TrainData::from_corpus(&corpus, build_vocab(&corpus))?;
    let config = ModelConfig::desk(data.vocab.len(), spec.frame_dim);
    let opts = TrainOptions {
        finetune_steps: 600,
        eval_interval: 50,
        patience: 100,
        ..TrainOptions::default()
    };
    run_recipe(&TrainingRecipe::preset("xstnet-base")?, &data, &config, &opts, Some(&dir))?;
    let files = list_checkpoints(&dir)?;
    println!("{} checkpoints on disk, steps {:?}", files.len(), files.iter().map(|f| f.0).collect::<Vec<_>>());

    let dev = data.held_out(Task::St, Split::Dev);
    let last = Checkpoint::load(&files.last().expect("checkpoints written").1)?.to_model()?;
    println!("last checkpoint   dev ST loss {:.4}", dataset_loss(&last, &data.vocab, dev)?);
    for k in [1, 5, 10] {
        let avg = cmd_average(&[dir.clone()], k, &dir.join(format!("avg{k}.xst")))?;
        println!("average of k={k:<3} dev ST loss {:.4}", dataset_loss(&avg.to_model()?, &data.vocab, dev)?);
    }
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let d = std::env::temp_dir().join(format!("xst-avg-{}", std::process::id()));
    std::fs::create_dir_all(&d)?;
    Ok(d)
}
