//! Verifies reverse-mode gradients against central finite differences:
//! first on single operations, then on the full training loss of a tiny
//! model for each of the four tasks.
//!
//!     cargo run --release --example gradient_check

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xstnet::data::{build_vocab, generate_corpus, make_batches, SynthSpec, Task};
use xstnet::model::{ModelConfig, XstNetModel};
use xstnet::numerics::{check_graph, Tensor, DEFAULT_STEP, DEFAULT_TOL};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let x = random(&[3, 5], &mut rng);
    let w = random(&[5, 4], &mut rng);
    let r = check_graph(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let s = g.softmax(y, 1)?;
            Ok(g.sum(s))
        },
        &[x.clone(), w],
        DEFAULT_STEP,
        DEFAULT_TOL,
    )?;
    println!("matmul+softmax   max rel error {:.2e}  passed {}", r.max_error, r.passed);

    let gain = random(&[5], &mut rng);
    let bias = random(&[5], &mut rng);
    let r = check_graph(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let y = g.gelu(y);
            let y = g.mul(y, y)?;
            Ok(g.mean(y))
        },
        &[x, gain, bias],
        DEFAULT_STEP,
        DEFAULT_TOL,
    )?;
    println!("layer_norm+gelu  max rel error {:.2e}  passed {}", r.max_error, r.passed);

    // Whole model: perturb 100 random parameter coordinates per task.
    let spec = SynthSpec {
        n_triples: 4,
        n_ext_pairs: 4,
        n_dev: 1,
        n_test: 1,
        src_vocab_size: 5,
        frame_dim: 3,
        ..SynthSpec::default()
    };
    let (corpus, _) = generate_corpus(&spec)?;
    let vocab = build_vocab(&corpus);
    let model = XstNetModel::<f64>::new(ModelConfig::tiny(vocab.len(), 3), 1)?;
    for task in Task::ALL {
        let batch = make_batches(&corpus.dataset(task)?, &vocab, 2, 0)?.remove(0);
        let loss_of = |m: &XstNetModel<f64>| -> f64 {
            let mut s = m.eval_session();
            let l = s.forward_loss(&batch, 0.1).unwrap();
            s.graph.value(l).item()
        };
        // Without a dropout seed the training session is deterministic.
        let mut s = model.train_session(None);
        let l = s.forward_loss(&batch, 0.1)?;
        let grads = s.backward(l)?;
        let coords: Vec<(String, usize)> = grads.iter().flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i))).collect();
        assert!(!coords.is_empty(), "no gradients for {task}");
        let mut worst = 0.0f64;
        for k in sample(&mut rng, coords.len(), 100.min(coords.len())) {
            let (name, i) = &coords[k];
            let mut up = model.clone();
            up.params_mut().get_mut(name).unwrap().data_mut()[*i] += DEFAULT_STEP;
            let mut down = model.clone();
            down.params_mut().get_mut(name).unwrap().data_mut()[*i] -= DEFAULT_STEP;
            let numeric = (loss_of(&up) - loss_of(&down)) / (2.0 * DEFAULT_STEP);
            let analytic = grads[name].data()[*i];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
        }
        println!(
            "{:<7} loss     max rel error {worst:.2e}  passed {}  ({} params with gradients)",
            task.name(),
            worst <= DEFAULT_TOL,
            grads.len()
        );
    }
    Ok(())
}
