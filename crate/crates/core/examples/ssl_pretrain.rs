//! Optional self-supervised stage for the acoustic encoder: a fraction of
//! frames is replaced by a learned mask vector and reconstructed through a
//! linear head. Prints the masked-frame MSE as training proceeds.
//!
//!     cargo run --release --example ssl_pretrain

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xstnet::data::{build_vocab, generate_corpus, SynthSpec};
use xstnet::model::{ModelConfig, XstNetModel};
use xstnet::numerics::Tensor;
use xstnet::train::{adam_step, AdamState};

fn main() -> anyhow::Result<()> {
    let spec = SynthSpec {
        n_triples: 64,
        n_ext_pairs: 1,
        ..SynthSpec::default()
    };
    let (corpus, _) = generate_corpus(&spec)?;
    let vocab = build_vocab(&corpus);
    let mut model = XstNetModel::<f32>::new(ModelConfig::desk(vocab.len(), spec.frame_dim), 0)?;

    let batch = 16;
    let mut adam = AdamState::new(1e-3, 50);
    for step in 0..300 {
        let utts: Vec<_> = corpus.train.iter().cycle().skip(step * batch % corpus.train.len()).take(batch).collect();
        let t_max = utts.iter().map(|u| u.frames.n_frames).max().unwrap_or(1);
        let fd = spec.frame_dim;
        let mut data = vec![0f32; batch * t_max * fd];
        for (b, u) in utts.iter().enumerate() {
            data[b * t_max * fd..][..u.frames.data.len()].copy_from_slice(&u.frames.data);
        }
        let frames = Tensor::new(vec![batch, t_max, fd], data)?;
        let lengths: Vec<usize> = utts.iter().map(|u| u.frames.n_frames).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(step as u64);
        let mut s = model.train_session(Some(step as u64));
        let loss = s.ssl_pretrain_loss(&frames, &lengths, 0.15, &mut rng)?;
        let value = s.graph.value(loss).item();
        let grads = s.backward(loss)?;
        adam_step(model.params_mut(), grads, &mut adam)?;
        if step % 50 == 0 || step == 299 {
            println!("step {step:>3}  masked-frame MSE {value:.4}");
        }
    }
    Ok(())
}
