//! Loads a checkpoint (for example `average.xst` from `train_recipe`),
//! decodes the test split greedily and with beam search, and scores ST
//! with BLEU and ASR with WER. Without arguments a small model is trained
//! first so the example runs standalone.
//!
//!     cargo run --release --example decode_and_score -- /tmp/xst-exp1/average.xst

use std::path::PathBuf;

use xstnet::data::{build_vocab, generate_corpus, SynthSpec, Task};
use xstnet::infer::{translate, DecodeOptions};
use xstnet::metrics::{corpus_bleu, wer};
use xstnet::model::{ModelConfig, XstNetModel};
use xstnet::train::{run_recipe, Checkpoint, Split, TrainData, TrainOptions, TrainingRecipe};

fn main() -> anyhow::Result<()> {
    let spec = SynthSpec::default();
    let (corpus, _) = generate_corpus(&spec)?;
    let data = TrainData::from_corpus(&corpus, build_vocab(&corpus))?;
    let model: XstNetModel<f32> = match std::env::args().nth(1).map(PathBuf::from) {
        Some(path) => Checkpoint::load(&path)?.to_model()?,
        None => {
            println!("no checkpoint given; training a small model first");
            let config = ModelConfig::desk(data.vocab.len(), spec.frame_dim);
            let opts = TrainOptions {
                pretrain_steps: 400,
                finetune_steps: 600,
                ..TrainOptions::default()
            };
            run_recipe(&TrainingRecipe::preset("exp1")?, &data, &config, &opts, None)?.averaged_model
        }
    };

    let refs = |task| -> Vec<String> {
        data.held_out(task, Split::Test).items.iter().map(|i| i.target.join(" ")).collect()
    };
    for (label, opts) in [("greedy", DecodeOptions::greedy()), ("beam 10", DecodeOptions::default())] {
        let st = translate(&model, &data.vocab, data.held_out(Task::St, Split::Test), &opts)?;
        let asr = translate(&model, &data.vocab, data.held_out(Task::Asr, Split::Test), &opts)?;
        let bleu = corpus_bleu(&st, &refs(Task::St))?;
        let w = wer(&asr, &refs(Task::Asr))?;
        println!("{label:>8}: ST BLEU {:6.2}   ASR WER {:.4}", bleu.value, w.value);
        if let (Some(p), Some(bp)) = (bleu.precisions(), bleu.brevity_penalty()) {
            println!("          n-gram precisions {:.3?}, brevity penalty {bp:.3}", p);
        }
    }
    Ok(())
}
