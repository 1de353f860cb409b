//! Trains one recipe on the default corpus and writes checkpoints,
//! `metrics.csv` and the averaged model. Arguments: recipe name (or an
//! inline stage list such as `MT_EXT:500/ST,ASR,MT`), output directory.
//!
//!     cargo run --release --example train_recipe -- exp1 /tmp/xst-exp1

use std::path::PathBuf;

use xstnet::data::{build_vocab, generate_corpus, SynthSpec, Task};
use xstnet::infer::DecodeOptions;
use xstnet::model::ModelConfig;
use xstnet::train::{evaluate, run_recipe, Split, TrainData, TrainOptions, TrainingRecipe};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "exp1".into());
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xst-train"));
    let recipe = if name.contains(':') || name.contains('/') {
        let specs: Vec<String> = name.split('/').map(String::from).collect();
        TrainingRecipe::from_specs("custom", &specs)?
    } else {
        TrainingRecipe::preset(&name)?
    };

    let spec = SynthSpec::default();
    let (corpus, _) = generate_corpus(&spec)?;
    let data = TrainData::from_corpus(&corpus, build_vocab(&corpus))?;
    let config = ModelConfig::desk(data.vocab.len(), spec.frame_dim);
    let opts = TrainOptions {
        seed: 17,
        ..TrainOptions::default()
    };
    let outcome = run_recipe(&recipe, &data, &config, &opts, Some(&out))?;

    for s in &outcome.stages {
        let curve = outcome.log.dev_curve(&s.name);
        let best = s.best.map_or("-".into(), |(step, v)| format!("{v:.4} at step {step}"));
        println!(
            "{}: {} steps{}, {} evals, best {} {best}",
            s.name,
            s.steps,
            if s.stopped_early { " (early stop)" } else { "" },
            curve.len(),
            s.metric.name()
        );
    }
    let st = evaluate(&outcome.averaged_model, &data, Task::St, Split::Test, &DecodeOptions::default())?;
    println!("averaged model: test ST BLEU {:.2} (beam 10)", st.value);
    println!("artifacts in {}", out.display());
    Ok(())
}
