//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Run a subset by number: `cargo test --release --test acceptance -- 1 4 10`.
//! Learning criteria (5 to 8) share their training runs and take most of
//! the wall time.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xstnet::cli::{self, AblationRow, RunConfig, SweepRow};
use xstnet::data::{
    build_vocab, generate_corpus, read_ext_pairs, read_manifest, write_ext_pairs, write_manifest,
    Batch, Corpus, PairItem, SynthSpec, Task, Vocabulary, AUDIO,
};
use xstnet::infer::{
    beam_decode, beam_search, exhaustive_search, greedy_decode, DecodeOptions, Hypothesis, StepScorer,
};
use xstnet::metrics::{corpus_bleu, edit_distance, wer};
use xstnet::model::{sinusoid_table, ModelConfig, XstNetModel};
use xstnet::numerics::{check_graph, finite_difference_check, Graph, Tensor, Var};
use xstnet::train::{average_checkpoints, Checkpoint};

// ---- pinned tolerances and settings --------------------------------------

const GRAD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_MODEL_POINTS: usize = 100;
const GRAD_TIME_LIMIT_S: f64 = 120.0;
const SUBSAMPLE_MAX_T: usize = 512;
const PAD_TOL: f32 = 1e-5;
const EMBED_TOL: f64 = 1e-12;
const TOY_VOCAB: usize = 3;
const TOY_MAX_LEN: usize = 4;
const TOY_MODELS: u64 = 50;
const GREEDY_CASES: usize = 100;
const BLEU_HAND: f64 = 60.65;
const BLEU_HAND_TOL: f64 = 0.01;
const WER_MAX_LEN: usize = 6;
const WER_ALPHABET: [&str; 3] = ["a", "b", "c"];
/// Nominal learning floor for test ST BLEU of exp1, seed 17.
const ST_FLOOR_NOMINAL: f64 = 90.0;
/// Floor frozen from the calibration run; see the decisions ledger.
const ST_FLOOR: f64 = 90.0;
const FLOOR_SEED: u64 = 17;
const MAX_STEPS: usize = 5000;
const SEEDS: [u64; 3] = [17, 18, 19];
const LOW_RESOURCE_TRIPLES: usize = 300;
const MULTITASK_GAIN: f64 = 1.0;
const ORDER_SLACK: f64 = 0.5;
const SWEEP_SIZES: [usize; 4] = [2000, 5000, 10000, 20000];
const SWEEP_BAND: f64 = 1.0;
const AVG_REL_TOL: f64 = 1e-7;
const AVG_K: usize = 10;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

type Check = fn(&mut Shared) -> anyhow::Result<Verdict>;

/// Training runs reused across criteria.
struct Shared {
    root: tempfile::TempDir,
    data_dir: Option<PathBuf>,
    main_ablation: Option<(Vec<AblationRow>, String)>,
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let checks: [(usize, &str, Check); 10] = [
        (1, "gradient suite", c1_gradients),
        (2, "structural invariants", c2_structure),
        (3, "decoding oracle", c3_decoding),
        (4, "metrics oracle", c4_metrics),
        (5, "learning floor", c5_floor),
        (6, "multi-task gain", c6_multitask),
        (7, "progressive-training ordering", c7_ordering),
        (8, "scaling trend", c8_scaling),
        (9, "reproducibility", c9_reproducible),
        (10, "round-trips", c10_round_trips),
    ];
    let mut shared = Shared {
        root: tempfile::tempdir().expect("temp dir"),
        data_dir: None,
        main_ablation: None,
    };
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, check) in checks {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let v = check(&mut shared).unwrap_or_else(|e| verdict(false, format!("error: {e:#}")));
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {} ({:.1}s)", v.detail, t0.elapsed().as_secs_f64());
        if !v.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---- helpers -------------------------------------------------------------

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(y * w)` for a fixed pseudo-random `w`, so that outputs with a
/// constant sum (softmax rows) still produce informative gradients.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> xstnet::Result<Var> {
    let n = g.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = g.mul_const(y, w)?;
    Ok(g.sum(p))
}

fn small_corpus(n: usize, src_vocab: usize, frame_dim: usize) -> (Corpus, Vocabulary) {
    let spec = SynthSpec {
        n_triples: n,
        n_ext_pairs: n,
        n_dev: 2,
        n_test: 2,
        src_vocab_size: src_vocab,
        frame_dim,
        ..SynthSpec::default()
    };
    let c = generate_corpus(&spec).unwrap().0;
    let v = build_vocab(&c);
    (c, v)
}

fn batch_of(c: &Corpus, v: &Vocabulary, task: Task, n: usize) -> Batch {
    let d = c.dataset(task).unwrap();
    let items: Vec<&PairItem> = d.items.iter().take(n).collect();
    Batch::from_items(task, &items, v).unwrap()
}

/// Generates the default corpus once for the learning criteria.
fn default_data(shared: &mut Shared) -> anyhow::Result<PathBuf> {
    if let Some(d) = &shared.data_dir {
        return Ok(d.clone());
    }
    let dir = shared.root.path().join("data");
    let mut cfg = learning_config();
    cfg.out_dir = Some(dir.clone());
    cli::cmd_gen_data(&cfg)?;
    shared.data_dir = Some(dir.clone());
    Ok(dir)
}

/// Library defaults plus disk hygiene: only the averaging window of
/// checkpoints is kept.
fn learning_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.set("train.keep_checkpoints", &AVG_K.to_string()).unwrap();
    cfg
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---- 1 -------------------------------------------------------------------

fn c1_gradients(_: &mut Shared) -> anyhow::Result<Verdict> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = |s: &[usize]| random(&mut rng, s);
    type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> xstnet::Result<Var>>;
    let a34 = r(&[3, 4]);
    let b34 = r(&[3, 4]);
    // ReLU away from its kink.
    let relu_in = a34.map(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    let ops: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
        ("add", vec![a34.clone(), b34.clone()], Box::new(|g, v| { let y = g.add(v[0], v[1])?; weighted_sum(g, y) })),
        ("sub", vec![a34.clone(), b34.clone()], Box::new(|g, v| { let y = g.sub(v[0], v[1])?; weighted_sum(g, y) })),
        ("mul", vec![a34.clone(), b34.clone()], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; weighted_sum(g, y) })),
        ("add_broadcast", vec![r(&[2, 3, 4]), r(&[4])], Box::new(|g, v| { let y = g.add_broadcast(v[0], v[1])?; weighted_sum(g, y) })),
        ("add_const", vec![a34.clone()], Box::new(|g, v| {
            let y = g.add_const(v[0], Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap())?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y)
        })),
        ("mul_const", vec![a34.clone()], Box::new(|g, v| {
            let y = g.mul_const(v[0], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect())?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        })),
        ("scale", vec![a34.clone()], Box::new(|g, v| { let y = g.scale(v[0], -1.7); weighted_sum(g, y) })),
        ("add_scalar", vec![a34.clone()], Box::new(|g, v| {
            let y = g.add_scalar(v[0], 0.4);
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        })),
        ("dropout", vec![a34.clone()], Box::new(|g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let y = g.dropout(v[0], 0.3, &mut rng)?;
            weighted_sum(g, y)
        })),
        ("gelu", vec![r(&[3, 4]).map(|x| 3.0 * x)], Box::new(|g, v| { let y = g.gelu(v[0]); weighted_sum(g, y) })),
        ("relu", vec![relu_in], Box::new(|g, v| { let y = g.relu(v[0]); weighted_sum(g, y) })),
        ("matmul", vec![r(&[3, 5]), r(&[5, 2])], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; weighted_sum(g, y) })),
        ("matmul batched", vec![r(&[2, 3, 5]), r(&[2, 5, 2])], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; weighted_sum(g, y) })),
        ("matmul_t a^T", vec![r(&[5, 3]), r(&[5, 2])], Box::new(|g, v| { let y = g.matmul_t(v[0], v[1], true, false)?; weighted_sum(g, y) })),
        ("matmul_t b^T", vec![r(&[3, 5]), r(&[2, 5])], Box::new(|g, v| { let y = g.matmul_t(v[0], v[1], false, true)?; weighted_sum(g, y) })),
        ("matmul_t both", vec![r(&[5, 3]), r(&[2, 5])], Box::new(|g, v| { let y = g.matmul_t(v[0], v[1], true, true)?; weighted_sum(g, y) })),
        ("linear", vec![r(&[2, 3, 5]), r(&[5, 4]), r(&[4])], Box::new(|g, v| { let y = g.linear(v[0], v[1], Some(v[2]))?; weighted_sum(g, y) })),
        ("transpose", vec![a34.clone()], Box::new(|g, v| { let y = g.transpose(v[0])?; weighted_sum(g, y) })),
        ("reshape", vec![a34.clone()], Box::new(|g, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            let w = g.constant(Tensor::new(vec![6, 2], (0..12).map(|i| (i as f64).sin()).collect()).unwrap());
            let y = g.matmul(y, w)?;
            weighted_sum(g, y)
        })),
        ("permute", vec![r(&[2, 3, 4])], Box::new(|g, v| { let y = g.permute(v[0], &[2, 0, 1])?; weighted_sum(g, y) })),
        ("concat axis 0", vec![r(&[2, 4]), r(&[3, 4])], Box::new(|g, v| { let y = g.concat(&[v[0], v[1]], 0)?; weighted_sum(g, y) })),
        ("concat axis 1", vec![r(&[3, 2]), r(&[3, 4])], Box::new(|g, v| { let y = g.concat(&[v[0], v[1]], 1)?; weighted_sum(g, y) })),
        ("softmax last axis", vec![r(&[2, 3, 4])], Box::new(|g, v| { let y = g.softmax(v[0], 2)?; weighted_sum(g, y) })),
        ("softmax axis 0", vec![a34.clone()], Box::new(|g, v| { let y = g.softmax(v[0], 0)?; weighted_sum(g, y) })),
        ("layer_norm", vec![r(&[3, 6]), r(&[6]), r(&[6])], Box::new(|g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted_sum(g, y) })),
        ("conv1d k5 s2 p2", vec![r(&[2, 9, 3]), r(&[5, 3, 4]), r(&[4])], Box::new(|g, v| { let y = g.conv1d(v[0], v[1], v[2], 2, 2)?; weighted_sum(g, y) })),
        ("conv1d unbatched", vec![r(&[7, 2]), r(&[3, 2, 3]), r(&[3])], Box::new(|g, v| { let y = g.conv1d(v[0], v[1], v[2], 1, 1)?; weighted_sum(g, y) })),
        ("embedding", vec![r(&[5, 3])], Box::new(|g, v| { let y = g.embedding(v[0], &[4, 0, 4, 2], &[2, 2])?; weighted_sum(g, y) })),
        ("cross_entropy", vec![r(&[2, 3, 5])], Box::new(|g, v| g.cross_entropy(v[0], &[1, 0, 4, 2, 3, 0], 0, 0.1))),
        ("nll_loss", vec![r(&[4, 5])], Box::new(|g, v| g.nll_loss(v[0], &[1, 0, 4, 2], 0))),
        ("mean", vec![a34.clone()], Box::new(|g, v| { let y = g.mul(v[0], v[0])?; Ok(g.mean(y)) })),
    ];
    let mut points = 0;
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for (name, inputs, build) in &ops {
        let rep = check_graph(|g, v| build(g, v), inputs, GRAD_STEP, GRAD_REL_TOL)?;
        points += rep.errors.len();
        if rep.max_error > worst.0 {
            worst = (rep.max_error, name);
        }
        if !rep.passed {
            failures.push(format!("{name} ({:.2e})", rep.max_error));
        }
    }
    let n_ops = ops.len();

    // Four-task loss of a tiny 64-bit model.
    let (c, v) = small_corpus(20, 6, 4);
    let model = XstNetModel::<f64>::new(ModelConfig::tiny(v.len(), 4), 10)?;
    let mut model_worst = 0.0f64;
    for task in Task::ALL {
        let batch = batch_of(&c, &v, task, 2);
        let mut s = model.train_session(None);
        let loss = s.forward_loss(&batch, 0.1)?;
        let grads = s.backward(loss)?;
        let names: Vec<&String> = grads.keys().collect();
        let coords: Vec<(usize, usize)> =
            names.iter().enumerate().flat_map(|(ni, n)| (0..grads[*n].len()).map(move |j| (ni, j))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + task.index() as u64);
        let picked: Vec<(usize, usize)> =
            sample(&mut rng, coords.len(), GRAD_MODEL_POINTS.min(coords.len())).into_iter().map(|i| coords[i]).collect();
        let point: Vec<f64> = picked.iter().map(|&(ni, j)| model.param(names[ni]).unwrap().data()[j]).collect();
        let analytic: Vec<f64> = picked.iter().map(|&(ni, j)| grads[names[ni]].data()[j]).collect();
        let f = |x: &[f64]| {
            let mut m = model.clone();
            for (k, &(ni, j)) in picked.iter().enumerate() {
                m.params_mut().get_mut(names[ni]).unwrap().data_mut()[j] = x[k];
            }
            let mut s = m.eval_session();
            let l = s.forward_loss(&batch, 0.1).unwrap();
            s.graph.value(l).item()
        };
        let rep = finite_difference_check(f, |_| analytic.clone(), &point, GRAD_STEP, GRAD_REL_TOL);
        points += rep.errors.len();
        model_worst = model_worst.max(rep.max_error);
        if picked.len() < GRAD_MODEL_POINTS || !rep.passed {
            failures.push(format!("{task} model ({} points, {:.2e})", picked.len(), rep.max_error));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= GRAD_TIME_LIMIT_S {
        failures.push(format!("runtime {secs:.0}s"));
    }
    Ok(verdict(
        failures.is_empty(),
        format!(
            "{n_ops} ops + 4 task losses, {points} points, op max rel err {:.1e} ({}), model max {model_worst:.1e}, tol {GRAD_REL_TOL:.0e}{}",
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    ))
}

// ---- 2 -------------------------------------------------------------------

fn c2_structure(_: &mut Shared) -> anyhow::Result<Verdict> {
    let mut problems = Vec::new();
    let fd = 4;
    let (c, v) = small_corpus(20, 6, fd);
    let desk = XstNetModel::<f32>::new(ModelConfig::desk(v.len(), fd), 3)?;

    // Length law over every T in 1..=512.
    let mut lengths_ok = 0;
    for t in 1..=SUBSAMPLE_MAX_T {
        let expect = (t + 3) / 4;
        let frames = Tensor::new(vec![1, t, fd], (0..t * fd).map(|i| ((i * 7) % 11) as f32 / 11.0).collect())?;
        let mut s = desk.eval_session();
        let ctx = s.encode_acoustic(&frames, &[t])?;
        let e_s = s.subsample(&ctx)?;
        let got = (s.graph.shape(e_s.var)[1], e_s.lengths[0]);
        if got == (expect, expect) {
            lengths_ok += 1;
        } else if problems.len() < 5 {
            problems.push(format!("T={t}: {got:?} != {expect}"));
        }
    }

    // Position 0 holds the indicator embedding plus PE[0].
    let m64 = XstNetModel::<f64>::new(ModelConfig::desk(v.len(), fd), 4)?;
    let d = m64.config().d_model;
    let pe = sinusoid_table::<f64>(2, d);
    let table = m64.param("embed.tokens").unwrap().data().to_vec();
    let mut tag_err = 0.0f64;
    let mut s = m64.eval_session();
    let frames = Tensor::new(vec![2, 9, fd], (0..2 * 9 * fd).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let ctx = s.encode_acoustic(&frames, &[9, 6])?;
    let e_s = s.subsample(&ctx)?;
    let x = s.embed_audio(&e_s)?;
    let val = s.graph.value(x.var).data().to_vec();
    let row = val.len() / 2;
    for b in 0..2 {
        for i in 0..d {
            tag_err = tag_err.max((val[b * row + i] - (table[AUDIO * d + i] + pe.data()[i])).abs());
        }
    }
    let tags = [v.lang_id("en")?, v.lang_id("fr")?];
    let toks = vec![vec![7, 8, 9], vec![7, 8, 9]];
    let mut s = m64.eval_session();
    let x = s.embed_text(&toks, &tags)?;
    let val = s.graph.value(x.var).data().to_vec();
    let scale = (d as f64).sqrt();
    for (b, &tag) in tags.iter().enumerate() {
        for i in 0..d {
            tag_err = tag_err.max((val[b * 4 * d + i] - (table[tag * d + i] * scale + pe.data()[i])).abs());
        }
    }
    let rest_identical = val[d..4 * d] == val[5 * d..8 * d];
    if tag_err > EMBED_TOL || !rest_identical {
        problems.push(format!("tag identity err {tag_err:.1e}, rest identical {rest_identical}"));
    }

    // Causality: changing token j leaves logits before j bit-identical.
    let mut causal_checks = 0;
    for (task, seed) in [(Task::Mt, 0u64), (Task::St, 1)] {
        let b = batch_of(&c, &v, task, 1);
        let vsz = v.len();
        let logits_for = |dec: Vec<usize>| -> xstnet::Result<Vec<f32>> {
            let mut s = desk.eval_session();
            let mem = s.encode(&b.source)?;
            let out = s.decoder_forward(&[dec], &mem)?;
            Ok(s.graph.value(out).data().to_vec())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<usize> = (0..8).map(|_| rng.random_range(6..vsz)).collect();
        let a = logits_for(base.clone())?;
        for j in 1..base.len() {
            let mut alt = base.clone();
            alt[j] = if alt[j] + 1 < vsz { alt[j] + 1 } else { 6 };
            let bb = logits_for(alt)?;
            causal_checks += 1;
            if a[..j * vsz] != bb[..j * vsz] || a[j * vsz..] == bb[j * vsz..] {
                problems.push(format!("{task}: causality broken at {j}"));
            }
        }
    }

    // Padding invariance for every task.
    let mut pad_diff = 0.0f32;
    for task in Task::ALL {
        let ds = c.dataset(task)?;
        let mut items: Vec<&PairItem> = ds.items.iter().collect();
        items.sort_by_key(|i| (i.source.len(), i.target.len()));
        let (short, long) = (items[0], *items.last().unwrap());
        let logits = |b: &Batch| -> xstnet::Result<(usize, Vec<f32>)> {
            let mut s = desk.eval_session();
            let mem = s.encode(&b.source)?;
            let inputs: Vec<Vec<usize>> =
                b.bos.iter().zip(&b.targets).map(|(&t, y)| std::iter::once(t).chain(y.iter().copied()).collect()).collect();
            let out = s.decoder_forward(&inputs, &mem)?;
            let sh = s.graph.shape(out);
            Ok((sh[1] * sh[2], s.graph.value(out).data().to_vec()))
        };
        let (n, alone) = logits(&Batch::from_items(task, &[short], &v)?)?;
        let (_, padded) = logits(&Batch::from_items(task, &[short, long], &v)?)?;
        let shared_rows = (short.target.len() + 1) * v.len();
        let diff = alone[..shared_rows.min(n)]
            .iter()
            .zip(&padded)
            .map(|(x, y)| (x - y).abs())
            .fold(0f32, f32::max);
        pad_diff = pad_diff.max(diff);
    }
    if pad_diff >= PAD_TOL {
        problems.push(format!("pad diff {pad_diff:.1e}"));
    }
    Ok(verdict(
        problems.is_empty() && lengths_ok == SUBSAMPLE_MAX_T,
        format!(
            "length law {lengths_ok}/{SUBSAMPLE_MAX_T}, tag err {tag_err:.1e} (tol {EMBED_TOL:.0e}), {causal_checks} causal edits exact, pad diff {pad_diff:.1e} (tol {PAD_TOL:.0e}){}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join(", ")) }
        ),
    ))
}

// ---- 3 -------------------------------------------------------------------

/// Logits depend on (position, last token); token 0 is `[eos]`.
struct Toy {
    table: Vec<f64>,
}

impl Toy {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = TOY_MAX_LEN * TOY_VOCAB * TOY_VOCAB;
        Toy {
            table: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        }
    }

    fn log_probs_of(&self, prefix: &[usize]) -> Vec<f64> {
        let pos = (prefix.len() - 1).min(TOY_MAX_LEN - 1);
        let last = prefix.last().unwrap() % TOY_VOCAB;
        let row = &self.table[(pos * TOY_VOCAB + last) * TOY_VOCAB..][..TOY_VOCAB];
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        row.iter().map(|x| x - lse).collect()
    }
}

impl StepScorer for Toy {
    fn eos(&self) -> usize {
        0
    }

    fn log_probs(&mut self, _rows: &[usize], prefixes: &[Vec<usize>]) -> xstnet::Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.log_probs_of(p)).collect())
    }
}

/// Enumerates every output directly: content strings of length
/// `0..max_len-1` closed by `[eos]`, plus unterminated strings that fill
/// `max_len`. Length for normalisation counts content plus `[eos]`.
fn toy_oracle(toy: &Toy, bos: usize, alpha: f64) -> (Vec<usize>, f64) {
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut offer = |norm: f64, tokens: Vec<usize>| {
        let better = match &best {
            None => true,
            Some((b, t)) => norm > *b || (norm == *b && tokens < *t),
        };
        if better {
            best = Some((norm, tokens));
        }
    };
    let content_max = TOY_MAX_LEN - 1;
    for n in 0..=content_max {
        for code in 0..(TOY_VOCAB - 1).pow(n as u32) {
            let mut seq = vec![bos];
            let mut c = code;
            for _ in 0..n {
                seq.push(1 + c % (TOY_VOCAB - 1));
                c /= TOY_VOCAB - 1;
            }
            let mut score = 0.0;
            for k in 1..seq.len() {
                score += toy.log_probs_of(&seq[..k])[seq[k]];
            }
            if n < content_max {
                let s = score + toy.log_probs_of(&seq)[0];
                offer(s / ((n + 1) as f64).powf(alpha), seq.clone());
            } else {
                offer(score / (n.max(1) as f64).powf(alpha), seq);
            }
        }
    }
    let (norm, tokens) = best.unwrap();
    (tokens, norm)
}

fn c3_decoding(_: &mut Shared) -> anyhow::Result<Verdict> {
    let mut mismatches = Vec::new();
    let full_width = TOY_VOCAB.pow(TOY_MAX_LEN as u32);
    let mut compared = 0;
    for seed in 0..TOY_MODELS {
        let mut toy = Toy::new(seed);
        for alpha in [0.0, 1.0] {
            let (oracle_tokens, oracle_norm) = toy_oracle(&toy, 1, alpha);
            let beam: Vec<Hypothesis> = beam_search(&mut toy, 1, TOY_MAX_LEN, full_width, alpha)?;
            let exact = exhaustive_search(&mut toy, 1, TOY_MAX_LEN, alpha)?;
            compared += 1;
            let ok = beam[0].tokens == oracle_tokens
                && exact.tokens == oracle_tokens
                && (beam[0].normalized - oracle_norm).abs() < 1e-12;
            if !ok {
                mismatches.push(format!("seed {seed} alpha {alpha}"));
            }
        }
    }

    // Beam 1 against greedy on random tiny models.
    let (c, v) = small_corpus(12, 6, 4);
    let mut greedy_equal = 0;
    let mut cases = 0;
    let mut seed = 0u64;
    while cases < GREEDY_CASES {
        let mut cfg = ModelConfig::tiny(v.len(), 4);
        cfg.d_model = 16;
        let m = XstNetModel::<f32>::new(cfg, seed)?;
        for task in Task::ALL {
            let d = c.dataset(task)?;
            let item = &d.items[seed as usize % d.len()];
            let b = Batch::from_items(task, &[item], &v)?;
            let g = greedy_decode(&m, &v, &b.source, &b.bos, Some(12))?;
            let opts = DecodeOptions {
                beam_size: 1,
                max_len: Some(12),
                ..DecodeOptions::default()
            };
            let h = beam_decode(&m, &v, &b.source, b.bos[0], &opts)?;
            cases += 1;
            if h[0].tokens == g[0] {
                greedy_equal += 1;
            }
        }
        seed += 1;
    }
    Ok(verdict(
        mismatches.is_empty() && greedy_equal == cases,
        format!(
            "beam(width {full_width}) = enumeration on {}/{compared} toy searches (|V|={TOY_VOCAB}, max_len={TOY_MAX_LEN}, alpha 0 and 1); beam 1 = greedy on {greedy_equal}/{cases}{}",
            compared - mismatches.len(),
            if mismatches.is_empty() { String::new() } else { format!("; mismatched {}", mismatches.join(", ")) }
        ),
    ))
}

// ---- 4 -------------------------------------------------------------------

/// Memoised recursion straight from the edit-distance definition.
fn edit_oracle(a: &[usize], b: &[usize]) -> usize {
    fn go(a: &[usize], b: &[usize], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let key = (a.len(), b.len());
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let sub = go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
        let del = go(&a[1..], b, memo) + 1;
        let ins = go(a, &b[1..], memo) + 1;
        let v = sub.min(del).min(ins);
        memo.insert(key, v);
        v
    }
    go(a, b, &mut HashMap::new())
}

fn c4_metrics(_: &mut Shared) -> anyhow::Result<Verdict> {
    // Every n-gram of the hypothesis matches; c=4, r=6 gives BP=exp(-0.5).
    let rep = corpus_bleu(&["a b c d"], &["a b c d e f"])?;
    let p = rep.precisions().unwrap();
    let bp = rep.brevity_penalty().unwrap();
    let bleu_ok = (rep.value - BLEU_HAND).abs() <= BLEU_HAND_TOL
        && p.iter().all(|&x| x == 1.0)
        && (bp - (-0.5f64).exp()).abs() < 1e-15;

    let mut seqs: Vec<Vec<usize>> = Vec::new();
    for n in 0..=WER_MAX_LEN {
        for code in 0..WER_ALPHABET.len().pow(n as u32) {
            let mut c = code;
            seqs.push(
                (0..n)
                    .map(|_| {
                        let t = c % WER_ALPHABET.len();
                        c /= WER_ALPHABET.len();
                        t
                    })
                    .collect(),
            );
        }
    }
    let text: Vec<String> = seqs.iter().map(|s| s.iter().map(|&t| WER_ALPHABET[t]).collect::<Vec<_>>().join(" ")).collect();
    let mut pairs = 0usize;
    let mut bad = 0usize;
    for (i, h) in seqs.iter().enumerate() {
        for (j, r) in seqs.iter().enumerate() {
            let want = edit_oracle(h, r);
            let mut ok = edit_distance(h, r) == want;
            if !r.is_empty() {
                let w = wer(&[&text[i]], &[&text[j]])?;
                ok &= w.value == want as f64 / r.len() as f64;
            }
            pairs += 1;
            bad += usize::from(!ok);
        }
    }
    Ok(verdict(
        bleu_ok && bad == 0,
        format!(
            "hand BLEU {:.4} (target {BLEU_HAND} +/- {BLEU_HAND_TOL}, bp {bp:.6}); edit distance and WER agree with oracle on {}/{pairs} pairs of {} sequences (alphabet {}, length <= {WER_MAX_LEN})",
            rep.value,
            pairs - bad,
            seqs.len(),
            WER_ALPHABET.len()
        ),
    ))
}

// ---- 5 to 7: shared ablation runs ------------------------------------------

/// exp1 and exp3 over the three seeds on the default corpus, with the
/// convergence report.
fn main_ablation(shared: &mut Shared) -> anyhow::Result<(Vec<AblationRow>, String)> {
    if let Some(r) = &shared.main_ablation {
        return Ok(r.clone());
    }
    let data = default_data(shared)?;
    let out = shared.root.path().join("ablate-main");
    let mut cfg = learning_config();
    cfg.data_dir = Some(data);
    cfg.out_dir = Some(out.clone());
    cfg.set("ablate.recipes", "exp1,exp3")?;
    cfg.set("ablate.seeds", &seeds_list())?;
    let rows = cli::cmd_ablate(&cfg, true)?;
    let conv = std::fs::read_to_string(out.join("convergence.csv"))?;
    shared.main_ablation = Some((rows, conv));
    Ok(shared.main_ablation.clone().unwrap())
}

fn seeds_list() -> String {
    SEEDS.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

fn last_step(metrics_csv: &Path) -> anyhow::Result<usize> {
    let text = std::fs::read_to_string(metrics_csv)?;
    let last = text.lines().skip(1).last().unwrap_or("0");
    Ok(last.split(',').next().unwrap_or("0").parse()?)
}

fn c5_floor(shared: &mut Shared) -> anyhow::Result<Verdict> {
    let (rows, _) = main_ablation(shared)?;
    let row = rows
        .iter()
        .find(|r| r.recipe == "exp1" && r.seed == FLOOR_SEED)
        .ok_or_else(|| anyhow::anyhow!("no exp1 seed {FLOOR_SEED} run"))?;
    let steps = last_step(&shared.root.path().join(format!("ablate-main/exp1/seed{FLOOR_SEED}/metrics.csv")))?;
    Ok(verdict(
        row.test_st_bleu >= ST_FLOOR && steps <= MAX_STEPS,
        format!(
            "exp1 seed {FLOOR_SEED}: test ST BLEU {:.2} after {steps} steps (frozen floor {ST_FLOOR}, nominal {ST_FLOOR_NOMINAL}, step cap {MAX_STEPS})",
            row.test_st_bleu
        ),
    ))
}

fn c6_multitask(shared: &mut Shared) -> anyhow::Result<Verdict> {
    let data = shared.root.path().join("data-300");
    let mut cfg = learning_config();
    cfg.set("corpus.n_triples", &LOW_RESOURCE_TRIPLES.to_string())?;
    cfg.out_dir = Some(data.clone());
    cli::cmd_gen_data(&cfg)?;
    cfg.data_dir = Some(data);
    cfg.out_dir = Some(shared.root.path().join("ablate-300"));
    cfg.set("ablate.recipes", "xstnet-base,w-transf")?;
    cfg.set("ablate.seeds", &seeds_list())?;
    let rows = cli::cmd_ablate(&cfg, false)?;
    let of = |name: &str| rows.iter().filter(|r| r.recipe == name).map(|r| r.test_st_bleu).collect::<Vec<_>>();
    let (base, single) = (of("xstnet-base"), of("w-transf"));
    let gain = mean(&base) - mean(&single);
    Ok(verdict(
        gain >= MULTITASK_GAIN && base.len() == SEEDS.len() && single.len() == SEEDS.len(),
        format!(
            "{LOW_RESOURCE_TRIPLES} triples, {} steps each: xstnet-base {:.2} {base:.2?} vs w-transf {:.2} {single:.2?}, gain {gain:.2} (need >= {MULTITASK_GAIN})",
            cfg.train.finetune_steps,
            mean(&base),
            mean(&single)
        ),
    ))
}

/// Dev BLEU of the latest evaluation at or before `stage_step`.
fn curve_at(conv: &str, recipe: &str, seed: u64, stage_step: usize) -> Option<f64> {
    conv.lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[0] == recipe && f[1] == seed.to_string())
        .filter_map(|f| Some((f[2].parse::<usize>().ok()?, f[4].parse::<f64>().ok()?)))
        .filter(|&(s, _)| s <= stage_step)
        .max_by_key(|&(s, _)| s)
        .map(|(_, v)| v)
}

fn c7_ordering(shared: &mut Shared) -> anyhow::Result<Verdict> {
    let (rows, conv) = main_ablation(shared)?;
    let of = |name: &str| rows.iter().filter(|r| r.recipe == name).map(|r| r.test_st_bleu).collect::<Vec<_>>();
    let (e1, e3) = (of("exp1"), of("exp3"));
    let half = learning_config().train.finetune_steps / 2;
    let mut h1 = Vec::new();
    let mut h3 = Vec::new();
    for seed in SEEDS {
        h1.push(curve_at(&conv, "exp1", seed, half).ok_or_else(|| anyhow::anyhow!("no exp1 curve for {seed}"))?);
        h3.push(curve_at(&conv, "exp3", seed, half).ok_or_else(|| anyhow::anyhow!("no exp3 curve for {seed}"))?);
    }
    let final_ok = mean(&e1) >= mean(&e3) - ORDER_SLACK;
    let speed_ok = mean(&h1) >= mean(&h3);
    Ok(verdict(
        final_ok && speed_ok,
        format!(
            "test ST BLEU exp1 {:.2} {e1:.2?} vs exp3 {:.2} {e3:.2?} (slack {ORDER_SLACK}); dev BLEU at fine-tune step {half}: exp1 {:.2} {h1:.2?} vs exp3 {:.2} {h3:.2?}",
            mean(&e1),
            mean(&e3),
            mean(&h1),
            mean(&h3)
        ),
    ))
}

// ---- 8 -------------------------------------------------------------------

fn c8_scaling(shared: &mut Shared) -> anyhow::Result<Verdict> {
    let mut cfg = learning_config();
    cfg.set("train.seed", &FLOOR_SEED.to_string())?;
    cfg.set("sweep.sizes", &SWEEP_SIZES.map(|s| s.to_string()).join(","))?;
    cfg.out_dir = Some(shared.root.path().join("sweep"));
    let rows: Vec<SweepRow> = cli::cmd_sweep_ext(&cfg)?;
    let st_ok = rows.last().unwrap().st_bleu >= rows[0].st_bleu;
    let mt_ok = rows.windows(2).all(|w| w[1].mt_bleu >= w[0].mt_bleu - SWEEP_BAND);
    let table: Vec<String> = rows.iter().map(|r| format!("{}: mt {:.2} st {:.2}", r.ext_size, r.mt_bleu, r.st_bleu)).collect();
    Ok(verdict(
        st_ok && mt_ok && rows.len() == SWEEP_SIZES.len(),
        format!("{} (st last >= first: {st_ok}; mt non-decreasing within {SWEEP_BAND}: {mt_ok})", table.join(", ")),
    ))
}

// ---- 9 -------------------------------------------------------------------

const SMALL_CONFIG: &str = "\
corpus.n_triples = 40
corpus.n_ext_pairs = 80
corpus.n_dev = 6
corpus.n_test = 6
train.pretrain_steps = 20
train.finetune_steps = 30
train.eval_interval = 10
train.batch_size = 8
decode.beam = 3
ablate.recipes = exp1,exp3,w-transf
ablate.seeds = 1,2
sweep.sizes = 0,40,80
";

fn run_bin(args: &[&str]) -> anyhow::Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_xstnet")).args(args).env("RUST_LOG", "warn").output()?;
    if !out.status.success() {
        anyhow::bail!("xstnet {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

/// Every command of the CLI once, into `dir`.
fn cli_session(cfg_path: &Path, dir: &Path) -> anyhow::Result<()> {
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let cfg = s(cfg_path.to_path_buf());
    let data = s(dir.join("data"));
    let train = s(dir.join("train"));
    run_bin(&["--config", &cfg, "--seed", "5", "--out", &data, "gen-data"])?;
    run_bin(&["--config", &cfg, "--seed", "3", "--data", &data, "--out", &train, "train", "--recipe", "exp1"])?;
    let ckpt = s(dir.join("train/average.xst"));
    run_bin(&["--config", &cfg, "--data", &data, "--out", &s(dir.join("decode")), "decode", "--checkpoint", &ckpt])?;
    run_bin(&[
        "--out",
        &s(dir.join("score")),
        "score",
        "--hyp",
        &s(dir.join("decode/hyp.st.test.txt")),
        "--ref",
        &s(dir.join("decode/ref.st.test.txt")),
    ])?;
    run_bin(&["--out", &s(dir.join("avg")), "average", &train, "-k", "3"])?;
    run_bin(&["--config", &cfg, "--data", &data, "--out", &s(dir.join("ablate")), "ablate", "--convergence-report"])?;
    let mut sweep_cfg = std::fs::read_to_string(cfg_path)?;
    sweep_cfg.push_str("corpus.seed = 5\n");
    let sweep_path = dir.join("sweep.cfg");
    std::fs::write(&sweep_path, sweep_cfg)?;
    run_bin(&["--config", &s(sweep_path), "--out", &s(dir.join("sweep")), "sweep-ext"])?;
    // Rerun training from the echoed config.
    run_bin(&["--config", &s(dir.join("train").join(cli::RESOLVED_CONFIG)), "--out", &s(dir.join("retrain")), "train"])?;
    Ok(())
}

fn output_files(dir: &Path) -> anyhow::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|x| x.to_str()), Some("csv" | "txt")) {
                out.insert(p.strip_prefix(dir)?.to_path_buf(), std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn c9_reproducible(shared: &mut Shared) -> anyhow::Result<Verdict> {
    let root = shared.root.path().join("repro");
    std::fs::create_dir_all(&root)?;
    let cfg = root.join("small.cfg");
    std::fs::write(&cfg, SMALL_CONFIG)?;
    let (a, b) = (root.join("a"), root.join("b"));
    cli_session(&cfg, &a)?;
    cli_session(&cfg, &b)?;
    let (fa, fb) = (output_files(&a)?, output_files(&b)?);
    let mut differing: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    if fa.len() != fb.len() {
        differing.push(format!("{} vs {} files", fa.len(), fb.len()));
    }
    let echo_same = fa.get(Path::new("train/metrics.csv")) == fa.get(Path::new("retrain/metrics.csv"));
    let n_csv = fa.keys().filter(|k| k.extension().is_some_and(|e| e == "csv")).count();
    Ok(verdict(
        differing.is_empty() && echo_same && n_csv > 0,
        format!(
            "{} CSV/text outputs of gen-data, train, decode, score, average, ablate, sweep-ext compared: {} differ; echoed-config retrain metrics identical: {echo_same}{}",
            fa.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    ))
}

// ---- 10 ------------------------------------------------------------------

fn c10_round_trips(shared: &mut Shared) -> anyhow::Result<Verdict> {
    let dir = shared.root.path().join("roundtrip");
    std::fs::create_dir_all(&dir)?;
    let mut problems = Vec::new();
    let (c, v) = small_corpus(30, 12, 8);

    let bits = |xs: &[f32]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let manifest = write_manifest(&dir, "train", &c.train)?;
    let back = read_manifest(&manifest)?;
    let frames_exact = back.len() == c.train.len()
        && back.iter().zip(&c.train).all(|(x, y)| {
            x.id == y.id
                && x.transcript == y.transcript
                && x.translation == y.translation
                && x.frames.n_frames == y.frames.n_frames
                && bits(&x.frames.data) == bits(&y.frames.data)
        });
    if !frames_exact {
        problems.push("manifest/frames".to_string());
    }
    let ext_path = dir.join("ext.tsv");
    write_ext_pairs(&ext_path, &c.ext)?;
    if read_ext_pairs(&ext_path)? != c.ext {
        problems.push("external pairs".to_string());
    }
    let vocab_path = dir.join("vocab.txt");
    v.save(&vocab_path)?;
    if Vocabulary::load(&vocab_path)?.tokens() != v.tokens() {
        problems.push("vocabulary".to_string());
    }

    // Checkpoints: file and byte round-trips.
    let cfg = ModelConfig::desk(v.len(), 8);
    let ckpts: Vec<Checkpoint> = (0..AVG_K)
        .map(|i| {
            let m = XstNetModel::<f32>::new(cfg.clone(), 40 + i as u64).unwrap();
            Checkpoint::from_model(&m, 100 * (i + 1), vec![("run".into(), format!("r{i}"))])
        })
        .collect();
    let mut ckpt_exact = true;
    for (i, ck) in ckpts.iter().enumerate() {
        let path = dir.join(format!("c{i}.xst"));
        ck.save(&path)?;
        let back = Checkpoint::load(&path)?;
        ckpt_exact &= back.step == ck.step
            && back.config == ck.config
            && back.metadata == ck.metadata
            && back.params.len() == ck.params.len()
            && back.params.iter().all(|(k, t)| t.shape() == ck.params[k].shape() && bits(t.data()) == bits(ck.params[k].data()))
            && back.to_bytes() == std::fs::read(&path)?;
    }
    if !ckpt_exact {
        problems.push("checkpoint".to_string());
    }

    // Averaging against a reverse-order f64 summation.
    let avg = average_checkpoints(&ckpts)?;
    let mut worst_rel = 0.0f64;
    let mut compared = 0usize;
    for (name, t) in &avg.params {
        for (i, &a) in t.data().iter().enumerate() {
            let mut sum = 0.0f64;
            for ck in ckpts.iter().rev() {
                sum += ck.params[name].data()[i] as f64;
            }
            let oracle = sum / ckpts.len() as f64;
            let err = (a as f64 - oracle).abs();
            let rel = if oracle == 0.0 { if a == 0.0 { 0.0 } else { f64::INFINITY } } else { err / oracle.abs() };
            worst_rel = worst_rel.max(rel);
            compared += 1;
        }
    }
    if worst_rel > AVG_REL_TOL {
        problems.push(format!("average rel err {worst_rel:.2e}"));
    }
    Ok(verdict(
        problems.is_empty(),
        format!(
            "manifest+frames {} triples, ext pairs, vocab {} tokens, {AVG_K} checkpoints bit-exact: {}; average of {AVG_K} vs oracle on {compared} values, max rel err {worst_rel:.2e} (tol {AVG_REL_TOL:.0e})",
            c.train.len(),
            v.len(),
            problems.is_empty()
        ),
    ))
}
