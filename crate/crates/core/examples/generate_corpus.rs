//! Writes the default synthetic corpus (manifests, frame sidecars, external
//! MT pairs, vocabulary) to a directory and prints one triple.
//!
//!     cargo run --release --example generate_corpus -- /tmp/xst-data

use std::path::PathBuf;

use xstnet::cli::{cmd_gen_data, load_corpus, RunConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xst-data"));
    let cfg = RunConfig {
        out_dir: Some(out.clone()),
        ..RunConfig::default()
    };
    cmd_gen_data(&cfg)?;

    let (corpus, vocab) = load_corpus(&out)?;
    let t = &corpus.train[0];
    println!("{}: {} frames x {}", t.id, t.frames.n_frames, t.frames.frame_dim);
    println!("  transcript  {}", t.transcript.join(" "));
    println!("  translation {}", t.translation.join(" "));
    println!("  frame 0     {:.2?}", &t.frames.frame(0)[..4]);
    println!("vocabulary: {} entries, first {:?}", vocab.len(), &vocab.tokens()[..8]);
    println!("files in {}:", out.display());
    let mut names: Vec<_> = std::fs::read_dir(&out)?.filter_map(|e| e.ok()).map(|e| e.file_name()).collect();
    names.sort();
    for n in names {
        println!("  {}", n.to_string_lossy());
    }
    Ok(())
}
