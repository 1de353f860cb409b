use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::XstNetModel;
use crate::data::{Batch, BatchSource, AUDIO, PAD};
use crate::error::{Error, Result};
use crate::numerics::{Element, Graph, Tensor, Var};

const MASK_VALUE: f64 = -1e9;

/// A padded batch of sequences `[B, L, d]` and the valid length of each row.
#[derive(Clone, Debug)]
pub struct Seq {
    pub var: Var,
    pub lengths: Vec<usize>,
}

/// One forward pass over an [`XstNetModel`]: parameters are bound onto a
/// fresh tape on first use. A training session binds them as gradient
/// leaves and applies dropout; an eval session binds them as constants.
pub struct Session<'m, F: Element> {
    model: &'m XstNetModel<F>,
    pub graph: Graph<F>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
    rng: Option<ChaCha8Rng>,
    record_attention: bool,
    attention: Vec<(String, Var)>,
}

impl<'m, F: Element> Session<'m, F> {
    pub(crate) fn new(model: &'m XstNetModel<F>, trainable: bool, dropout_seed: Option<u64>) -> Self {
        Session {
            model,
            graph: Graph::new(),
            bound: BTreeMap::new(),
            trainable,
            rng: dropout_seed.map(ChaCha8Rng::seed_from_u64),
            record_attention: false,
            attention: Vec::new(),
        }
    }

    pub fn model(&self) -> &'m XstNetModel<F> {
        self.model
    }

    /// Keep every attention-weight tensor for inspection.
    pub fn record_attention(&mut self, on: bool) {
        self.record_attention = on;
    }

    /// `(sublayer name, weights [B*H, Lq, Lk])` in execution order.
    pub fn attention_weights(&self) -> &[(String, Var)] {
        &self.attention
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .model
            .param(name)
            .ok_or_else(|| Error::invalid("param", format!("no parameter named `{name}`")))?
            .clone();
        let v = if self.trainable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of every parameter read so far, in order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Runs backward from `loss` and returns the gradient of every bound
    /// parameter that the loss actually depends on.
    pub fn backward(&mut self, loss: Var) -> Result<BTreeMap<String, Tensor<F>>> {
        self.graph.backward(loss)?;
        let mut out = BTreeMap::new();
        let bound: Vec<(String, Var)> = self.bound.iter().map(|(k, &v)| (k.clone(), v)).collect();
        for (name, v) in bound {
            if let Some(g) = self.graph.take_grad(v) {
                let shape = self.graph.shape(v).to_vec();
                out.insert(name, Tensor::from_parts(shape, g));
            }
        }
        Ok(out)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.model.config().dropout;
        match self.rng.as_mut() {
            Some(rng) if p > 0.0 => self.graph.dropout(x, p, rng),
            _ => Ok(x),
        }
    }

    fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.linear(x, w, Some(b))
    }

    fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.layer_norm(x, g, b, self.model.config().ln_eps)
    }

    /// Zeroes every time step at or beyond each row's length.
    fn mask_time(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let s = self.graph.shape(x).to_vec();
        let (l, d) = (s[1], s[2]);
        if lengths.iter().all(|&n| n >= l) {
            return Ok(x);
        }
        let mut m = vec![F::zero(); s[0] * l * d];
        for (b, &n) in lengths.iter().enumerate() {
            for v in &mut m[b * l * d..(b * l + n.min(l)) * d] {
                *v = F::one();
            }
        }
        self.graph.mul_const(x, m)
    }

    fn conv(&mut self, prefix: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.conv1d(x, w, b, stride, padding)
    }

    fn attention(&mut self, prefix: &str, q_in: Var, kv_in: Var, key_lengths: &[usize], causal: bool) -> Result<Var> {
        let c = self.model.config();
        let (h, d) = (c.n_heads, c.d_model);
        let dh = d / h;
        let (bsz, lq) = (self.graph.shape(q_in)[0], self.graph.shape(q_in)[1]);
        let lk = self.graph.shape(kv_in)[1];
        let q = self.linear(&format!("{prefix}.q"), q_in)?;
        let k = self.linear(&format!("{prefix}.k"), kv_in)?;
        let v = self.linear(&format!("{prefix}.v"), kv_in)?;
        let split = |g: &mut Graph<F>, x: Var, l: usize| -> Result<Var> {
            let x = g.reshape(x, &[bsz, l, h, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[bsz * h, l, dh])
        };
        let q = split(&mut self.graph, q, lq)?;
        let k = split(&mut self.graph, k, lk)?;
        let v = split(&mut self.graph, v, lk)?;
        let scores = self.graph.matmul_t(q, k, false, true)?;
        let mut scores = self.graph.scale(scores, F::lit(1.0 / (dh as f64).sqrt()));
        let needs_mask = causal || key_lengths.iter().any(|&n| n < lk);
        if needs_mask {
            let mut mask = vec![F::zero(); bsz * h * lq * lk];
            let neg = F::lit(MASK_VALUE);
            for b in 0..bsz {
                for hh in 0..h {
                    let base = (b * h + hh) * lq * lk;
                    for i in 0..lq {
                        for j in 0..lk {
                            if j >= key_lengths[b] || (causal && j > i) {
                                mask[base + i * lk + j] = neg;
                            }
                        }
                    }
                }
            }
            scores = self.graph.add_const(scores, Tensor::from_parts(vec![bsz * h, lq, lk], mask))?;
        }
        let weights = self.graph.softmax(scores, 2)?;
        if self.record_attention {
            self.attention.push((prefix.to_string(), weights));
        }
        let ctx = self.graph.matmul(weights, v)?;
        let ctx = self.graph.reshape(ctx, &[bsz, h, lq, dh])?;
        let ctx = self.graph.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.graph.reshape(ctx, &[bsz, lq, d])?;
        self.linear(&format!("{prefix}.o"), ctx)
    }

    fn ffn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{prefix}.fc1"), x)?;
        let h = self.graph.relu(h);
        let h = self.dropout(h)?;
        self.linear(&format!("{prefix}.fc2"), h)
    }

    // LN → self-attention → residual; LN → FFN → residual.
    fn self_attn_layer(&mut self, prefix: &str, x: Var, lengths: &[usize], causal: bool) -> Result<Var> {
        let h = self.layer_norm(&format!("{prefix}.ln_attn"), x)?;
        let h = self.attention(&format!("{prefix}.self_attn"), h, h, lengths, causal)?;
        let h = self.dropout(h)?;
        let x = self.graph.add(x, h)?;
        self.ffn_block(prefix, x)
    }

    fn ffn_block(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.layer_norm(&format!("{prefix}.ln_ffn"), x)?;
        let h = self.ffn(&format!("{prefix}.ffn"), h)?;
        let h = self.dropout(h)?;
        self.graph.add(x, h)
    }

    fn positions(&self, len: usize) -> Result<Tensor<F>> {
        let c = self.model.config();
        if len > c.max_positions {
            return Err(Error::invalid(
                "positions",
                format!("sequence length {len} exceeds max_positions {}", c.max_positions),
            ));
        }
        let d = c.d_model;
        Ok(Tensor::from_parts(vec![len, d], self.model.positions().data()[..len * d].to_vec()))
    }

    /// Frames `[B, T, frame_dim]` → contextual representation `c`
    /// `[B, T, d]`; stride-1 convolutions then pre-LN self-attention.
    pub fn encode_acoustic(&mut self, frames: &Tensor<F>, lengths: &[usize]) -> Result<Seq> {
        let cfg = self.model.config().clone();
        let fd = cfg.acoustic.frame_dim;
        let s = frames.shape();
        if s.len() != 3 || s[2] != fd || lengths.len() != s[0] {
            return Err(Error::Shape {
                op: "encode_acoustic",
                lhs: s.to_vec(),
                rhs: vec![lengths.len(), 0, fd],
            });
        }
        if lengths.iter().any(|&n| n == 0 || n > s[1]) {
            return Err(Error::invalid("encode_acoustic", "utterance lengths must be in 1..=T"));
        }
        let mut x = self.graph.constant(frames.clone());
        for i in 0..cfg.acoustic.n_conv_layers {
            x = self.conv(&format!("acoustic.conv{i}"), x, 1, cfg.acoustic.conv_kernel / 2)?;
            x = self.graph.gelu(x);
            x = self.mask_time(x, lengths)?;
        }
        if cfg.acoustic.n_ctx_layers > 0 {
            for i in 0..cfg.acoustic.n_ctx_layers {
                x = self.self_attn_layer(&format!("acoustic.ctx{i}"), x, lengths, false)?;
            }
            x = self.layer_norm("acoustic.ln", x)?;
            x = self.mask_time(x, lengths)?;
        }
        Ok(Seq {
            var: x,
            lengths: lengths.to_vec(),
        })
    }

    /// `e_s = CNN(c)`: stride-2 GELU convolutions, length `ceil(T/4)` with
    /// the default two layers.
    pub fn subsample(&mut self, c: &Seq) -> Result<Seq> {
        let sub = self.model.config().subsampler.clone();
        let pad = sub.padding();
        let mut x = c.var;
        let mut lengths = c.lengths.clone();
        for i in 0..sub.n_layers {
            x = self.conv(&format!("subsample.conv{i}"), x, sub.stride, pad)?;
            x = self.graph.gelu(x);
            for n in &mut lengths {
                *n = crate::numerics::conv_out_len(*n, sub.kernel, sub.stride, pad).unwrap_or(1);
            }
            x = self.mask_time(x, &lengths)?;
        }
        Ok(Seq { var: x, lengths })
    }

    /// Prepends `e_[audio]` along time and adds sinusoidal positions.
    pub fn embed_audio(&mut self, e_s: &Seq) -> Result<Seq> {
        let (b, l, d) = {
            let s = self.graph.shape(e_s.var);
            (s[0], s[1], s[2])
        };
        let pe = self.positions(l + 1)?;
        let table = self.param("embed.tokens")?;
        let tag = self.graph.embedding(table, &vec![AUDIO; b], &[b, 1])?;
        debug_assert_eq!(self.graph.shape(tag)[2], d);
        let x = self.graph.concat(&[tag, e_s.var], 1)?;
        let x = self.graph.add_const(x, pe)?;
        let x = self.dropout(x)?;
        Ok(Seq {
            var: x,
            lengths: e_s.lengths.iter().map(|n| n + 1).collect(),
        })
    }

    /// Embeds `[lang] ++ tokens` per row, scaled by `sqrt(d)`, plus positions.
    pub fn embed_text(&mut self, tokens: &[Vec<usize>], tags: &[usize]) -> Result<Seq> {
        if tokens.len() != tags.len() || tokens.is_empty() {
            return Err(Error::invalid("embed_text", "one tag per sentence required"));
        }
        let rows: Vec<Vec<usize>> = tokens
            .iter()
            .zip(tags)
            .map(|(t, &tag)| std::iter::once(tag).chain(t.iter().copied()).collect())
            .collect();
        self.embed_tokens(&rows)
    }

    fn embed_tokens(&mut self, rows: &[Vec<usize>]) -> Result<Seq> {
        let d = self.model.config().d_model;
        let b = rows.len();
        let l = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD; b * l];
        for (i, r) in rows.iter().enumerate() {
            ids[i * l..i * l + r.len()].copy_from_slice(r);
        }
        let pe = self.positions(l)?;
        let table = self.param("embed.tokens")?;
        let x = self.graph.embedding(table, &ids, &[b, l])?;
        let x = self.graph.scale(x, F::lit((d as f64).sqrt()));
        let x = self.graph.add_const(x, pe)?;
        let x = self.dropout(x)?;
        Ok(Seq {
            var: x,
            lengths: rows.iter().map(Vec::len).collect(),
        })
    }

    /// Encoder input for either modality.
    pub fn embed_source(&mut self, source: &BatchSource) -> Result<Seq> {
        match source {
            BatchSource::Audio {
                frames,
                lengths,
                max_len,
                frame_dim,
            } => {
                let t = Tensor::from_parts(
                    vec![lengths.len(), *max_len, *frame_dim],
                    frames.iter().map(|&x| F::lit(x as f64)).collect(),
                );
                let c = self.encode_acoustic(&t, lengths)?;
                let e_s = self.subsample(&c)?;
                self.embed_audio(&e_s)
            }
            BatchSource::Text { tokens, tags } => self.embed_text(tokens, tags),
        }
    }

    /// Shared pre-LN encoder with a final layer norm.
    pub fn encoder_forward(&mut self, input: &Seq) -> Result<Seq> {
        let mut x = input.var;
        for i in 0..self.model.config().n_enc_layers {
            x = self.self_attn_layer(&format!("encoder.layer{i}"), x, &input.lengths, false)?;
        }
        x = self.layer_norm("encoder.ln", x)?;
        Ok(Seq {
            var: x,
            lengths: input.lengths.clone(),
        })
    }

    pub fn encode(&mut self, source: &BatchSource) -> Result<Seq> {
        let input = self.embed_source(source)?;
        self.encoder_forward(&input)
    }

    /// Places an already computed sequence (e.g. encoder memory) on this tape.
    pub fn constant_seq(&mut self, value: Tensor<F>, lengths: Vec<usize>) -> Seq {
        Seq {
            var: self.graph.constant(value),
            lengths,
        }
    }

    /// Teacher-forced decoder over `inputs` (each starting with its BOS
    /// tag); returns logits `[B, L, V]`.
    pub fn decoder_forward(&mut self, inputs: &[Vec<usize>], memory: &Seq) -> Result<Var> {
        let cfg = self.model.config().clone();
        let y = self.embed_tokens(inputs)?;
        let mut x = y.var;
        for i in 0..cfg.n_dec_layers {
            let p = format!("decoder.layer{i}");
            let h = self.layer_norm(&format!("{p}.ln_attn"), x)?;
            let h = self.attention(&format!("{p}.self_attn"), h, h, &y.lengths, true)?;
            let h = self.dropout(h)?;
            x = self.graph.add(x, h)?;
            let h = self.layer_norm(&format!("{p}.ln_cross"), x)?;
            let h = self.attention(&format!("{p}.cross_attn"), h, memory.var, &memory.lengths, false)?;
            let h = self.dropout(h)?;
            x = self.graph.add(x, h)?;
            x = self.ffn_block(&p, x)?;
        }
        x = self.layer_norm("decoder.ln", x)?;
        let (b, l, d) = (inputs.len(), self.graph.shape(x)[1], cfg.d_model);
        let flat = self.graph.reshape(x, &[b * l, d])?;
        let logits = if cfg.tie_embeddings {
            let table = self.param("embed.tokens")?;
            self.graph.matmul_t(flat, table, false, true)?
        } else {
            let w = self.param("output.weight")?;
            self.graph.matmul(flat, w)?
        };
        self.graph.reshape(logits, &[b, l, cfg.vocab_size])
    }

    /// Mean (optionally label-smoothed) NLL of the batch targets. The same
    /// path serves every task; only the source branch and BOS differ.
    pub fn forward_loss(&mut self, batch: &Batch, label_smoothing: f64) -> Result<Var> {
        let audio = matches!(batch.source, BatchSource::Audio { .. });
        if audio != batch.task.has_audio_source() {
            return Err(Error::Modality {
                task: batch.task.to_string(),
                expected: if batch.task.has_audio_source() { "audio" } else { "text" },
            });
        }
        let memory = self.encode(&batch.source)?;
        let (inputs, targets) = teacher_forcing(&batch.bos, &batch.targets);
        let logits = self.decoder_forward(&inputs, &memory)?;
        self.graph.cross_entropy(logits, &targets, PAD, label_smoothing)
    }

    /// Masked-frame reconstruction: replaces `round(mask_rate * T)` frames
    /// per utterance with a learned vector, runs the acoustic encoder and
    /// regresses the original frames at masked positions through a linear
    /// head. Zero when nothing is masked.
    pub fn ssl_pretrain_loss<R: Rng>(
        &mut self,
        frames: &Tensor<F>,
        lengths: &[usize],
        mask_rate: f64,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..=1.0).contains(&mask_rate) {
            return Err(Error::invalid("ssl_pretrain_loss", "mask_rate must be in [0, 1]"));
        }
        let s = frames.shape().to_vec();
        let (b, t, fd) = (s[0], s[1], s[2]);
        let mut masked = vec![false; b * t];
        for (bi, &n) in lengths.iter().enumerate() {
            let k = (mask_rate * n as f64).round() as usize;
            let mut pos: Vec<usize> = (0..n).collect();
            for i in 0..k {
                let j = rng.random_range(i..n);
                pos.swap(i, j);
                masked[bi * t + pos[i]] = true;
            }
        }
        let n_masked = masked.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return Ok(self.graph.constant(Tensor::scalar(F::zero())));
        }
        let keep: Vec<F> = masked
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { F::zero() } else { F::one() }, fd))
            .collect();
        let fill: Vec<F> = keep.iter().map(|&k| F::one() - k).collect();
        let x = self.graph.constant(frames.clone());
        let kept = self.graph.mul_const(x, keep)?;
        let table = self.param("ssl.mask_emb")?;
        let mask_vecs = self.graph.embedding(table, &vec![0; b * t], &[b, t])?;
        let mask_vecs = self.graph.mul_const(mask_vecs, fill.clone())?;
        let input = self.graph.add(kept, mask_vecs)?;
        let input_t = self.graph.value(input).clone();
        let c = {
            // Encode the corrupted frames; the input itself is a graph node so
            // the mask vector receives gradient through the first conv.
            self.encode_acoustic_var(input, &input_t, lengths)?
        };
        let pred = self.linear("ssl.head", c.var)?;
        let target = self.graph.constant(frames.clone());
        let diff = self.graph.sub(pred, target)?;
        let sq = self.graph.mul(diff, diff)?;
        let w = F::lit(1.0 / (n_masked * fd) as f64);
        let weighted = self.graph.mul_const(sq, fill.iter().map(|&f| f * w).collect())?;
        Ok(self.graph.sum(weighted))
    }

    fn encode_acoustic_var(&mut self, x0: Var, value: &Tensor<F>, lengths: &[usize]) -> Result<Seq> {
        let cfg = self.model.config().clone();
        if value.shape()[2] != cfg.acoustic.frame_dim {
            return Err(Error::Shape {
                op: "encode_acoustic",
                lhs: value.shape().to_vec(),
                rhs: vec![cfg.acoustic.frame_dim],
            });
        }
        let mut x = x0;
        for i in 0..cfg.acoustic.n_conv_layers {
            x = self.conv(&format!("acoustic.conv{i}"), x, 1, cfg.acoustic.conv_kernel / 2)?;
            x = self.graph.gelu(x);
            x = self.mask_time(x, lengths)?;
        }
        if cfg.acoustic.n_ctx_layers > 0 {
            for i in 0..cfg.acoustic.n_ctx_layers {
                x = self.self_attn_layer(&format!("acoustic.ctx{i}"), x, lengths, false)?;
            }
            x = self.layer_norm("acoustic.ln", x)?;
            x = self.mask_time(x, lengths)?;
        }
        Ok(Seq {
            var: x,
            lengths: lengths.to_vec(),
        })
    }
}

/// Decoder inputs `[bos] ++ y` and outputs `y ++ [eos]`, both padded with
/// `[pad]` to the longest row and flattened for the outputs.
pub fn teacher_forcing(bos: &[usize], targets: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let l = targets.iter().map(Vec::len).max().unwrap_or(0);
    let inputs = bos
        .iter()
        .zip(targets)
        .map(|(&b, t)| std::iter::once(b).chain(t[..t.len().saturating_sub(1)].iter().copied()).collect())
        .collect();
    let mut flat = vec![PAD; targets.len() * l];
    for (i, t) in targets.iter().enumerate() {
        flat[i * l..i * l + t.len()].copy_from_slice(t);
    }
    (inputs, flat)
}
