use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::numerics::{Element, Tensor};

/// Named parameter tensors in lexicographic name order.
pub type ParamStore<F = f32> = BTreeMap<String, Tensor<F>>;

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Normal(f64),
}

fn layer_norm(specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    specs.push((format!("{prefix}.gain"), vec![d], Init::Ones));
    specs.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
}

fn linear(specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d_in: usize, d_out: usize) {
    specs.push((
        format!("{prefix}.weight"),
        vec![d_in, d_out],
        Init::Xavier {
            fan_in: d_in,
            fan_out: d_out,
        },
    ));
    specs.push((format!("{prefix}.bias"), vec![d_out], Init::Zeros));
}

fn conv(specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, k: usize, c_in: usize, c_out: usize) {
    specs.push((
        format!("{prefix}.weight"),
        vec![k, c_in, c_out],
        Init::Xavier {
            fan_in: k * c_in,
            fan_out: c_out,
        },
    ));
    specs.push((format!("{prefix}.bias"), vec![c_out], Init::Zeros));
}

fn attention(specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        linear(specs, &format!("{prefix}.{p}"), d, d);
    }
}

fn ffn(specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize, d_ffn: usize) {
    linear(specs, &format!("{prefix}.fc1"), d, d_ffn);
    linear(specs, &format!("{prefix}.fc2"), d_ffn, d);
}

fn self_attn_layer(specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, c: &ModelConfig) {
    layer_norm(specs, &format!("{prefix}.ln_attn"), c.d_model);
    attention(specs, &format!("{prefix}.self_attn"), c.d_model);
    layer_norm(specs, &format!("{prefix}.ln_ffn"), c.d_model);
    ffn(specs, &format!("{prefix}.ffn"), c.d_model, c.d_ffn);
}

/// Every parameter of a model built from `c`, with its shape.
pub(crate) fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d_model;
    let fd = c.acoustic.frame_dim;
    let mut s = Vec::new();
    for i in 0..c.acoustic.n_conv_layers {
        let c_in = if i == 0 { fd } else { d };
        conv(&mut s, &format!("acoustic.conv{i}"), c.acoustic.conv_kernel, c_in, d);
    }
    for i in 0..c.acoustic.n_ctx_layers {
        self_attn_layer(&mut s, &format!("acoustic.ctx{i}"), c);
    }
    if c.acoustic.n_ctx_layers > 0 {
        layer_norm(&mut s, "acoustic.ln", d);
    }
    for i in 0..c.subsampler.n_layers {
        let c_in = if i == 0 && c.acoustic.n_conv_layers == 0 && c.acoustic.n_ctx_layers == 0 {
            fd
        } else {
            d
        };
        conv(&mut s, &format!("subsample.conv{i}"), c.subsampler.kernel, c_in, d);
    }
    s.push((
        "embed.tokens".into(),
        vec![c.vocab_size, d],
        Init::Normal((d as f64).powf(-0.5)),
    ));
    for i in 0..c.n_enc_layers {
        self_attn_layer(&mut s, &format!("encoder.layer{i}"), c);
    }
    layer_norm(&mut s, "encoder.ln", d);
    for i in 0..c.n_dec_layers {
        let p = format!("decoder.layer{i}");
        self_attn_layer(&mut s, &p, c);
        layer_norm(&mut s, &format!("{p}.ln_cross"), d);
        attention(&mut s, &format!("{p}.cross_attn"), d);
    }
    layer_norm(&mut s, "decoder.ln", d);
    if !c.tie_embeddings {
        s.push((
            "output.weight".into(),
            vec![d, c.vocab_size],
            Init::Xavier {
                fan_in: d,
                fan_out: c.vocab_size,
            },
        ));
    }
    s.push(("ssl.mask_emb".into(), vec![1, fd], Init::Normal(1.0)));
    linear(&mut s, "ssl.head", d, fd);
    s
}

pub(crate) fn init_params<F: Element>(c: &ModelConfig, seed: u64) -> ParamStore<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    param_specs(c)
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data: Vec<F> = match init {
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| F::lit(rng.random_range(-a..a))).collect()
                }
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| F::lit(dist.sample(&mut rng))).collect()
                }
            };
            (name, Tensor::from_parts(shape, data))
        })
        .collect()
}
