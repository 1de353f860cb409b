//! Smallest end-to-end run: synthesize a corpus, train the progressive
//! recipe for a few hundred steps, then translate and transcribe the same
//! audio with one model.
//!
//!     cargo run --release --example quickstart

use xstnet::data::{build_vocab, generate_corpus, SynthSpec, Task};
use xstnet::infer::{translate, DecodeOptions};
use xstnet::model::ModelConfig;
use xstnet::train::{evaluate, run_recipe, Split, TrainData, TrainOptions, TrainingRecipe};

fn main() -> anyhow::Result<()> {
    let spec = SynthSpec {
        n_triples: 300,
        n_ext_pairs: 3000,
        n_dev: 50,
        n_test: 50,
        ..SynthSpec::default()
    };
    let (corpus, _) = generate_corpus(&spec)?;
    let data = TrainData::from_corpus(&corpus, build_vocab(&corpus))?;
    let config = ModelConfig::desk(data.vocab.len(), spec.frame_dim);
    let opts = TrainOptions {
        pretrain_steps: 300,
        finetune_steps: 500,
        eval_interval: 100,
        ..TrainOptions::default()
    };
    let recipe = TrainingRecipe::preset("exp1")?;
    let outcome = run_recipe(&recipe, &data, &config, &opts, None)?;
    for s in &outcome.stages {
        println!("{:<9} {} steps, tasks {:?}", s.name, s.steps, s.task_counts);
    }

    let model = &outcome.averaged_model;
    let greedy = DecodeOptions::greedy();
    let st = evaluate(model, &data, Task::St, Split::Test, &greedy)?;
    let asr = evaluate(model, &data, Task::Asr, Split::Test, &greedy)?;
    println!("test ST BLEU {:.2}, test ASR WER {:.3}", st.value, asr.value);

    // One utterance, two decoder prompts.
    let pick = |task| {
        let mut d = (**data.held_out(task, Split::Test)).clone();
        d.items.truncate(1);
        d
    };
    let (st_one, asr_one) = (pick(Task::St), pick(Task::Asr));
    println!("audio     {}", st_one.items[0].id);
    println!("[en] ->   {}", translate(model, &data.vocab, &asr_one, &greedy)?[0]);
    println!("[fr] ->   {}", translate(model, &data.vocab, &st_one, &greedy)?[0]);
    println!("ref       {}", st_one.items[0].target.join(" "));
    Ok(())
}
