use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticConfig {
    pub frame_dim: usize,
    /// Stride-1 convolutions in front of the context layers.
    pub n_conv_layers: usize,
    pub conv_kernel: usize,
    /// Pre-LN self-attention layers over frames.
    pub n_ctx_layers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsamplerConfig {
    pub kernel: usize,
    pub stride: usize,
    pub n_layers: usize,
}

impl Default for SubsamplerConfig {
    fn default() -> Self {
        SubsamplerConfig {
            kernel: 5,
            stride: 2,
            n_layers: 2,
        }
    }
}

impl SubsamplerConfig {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Output length for an input of `t` frames.
    pub fn out_len(&self, t: usize) -> usize {
        (0..self.n_layers).fold(t, |len, _| {
            crate::numerics::conv_out_len(len, self.kernel, self.stride, self.padding()).unwrap_or(0)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub acoustic: AcousticConfig,
    pub subsampler: SubsamplerConfig,
    pub vocab_size: usize,
    /// Share the output projection with the token embedding table.
    pub tie_embeddings: bool,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Transformer-base sizes (hidden 512) over 768-dim acoustic features.
    pub fn full_scale(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 512,
            n_enc_layers: 6,
            n_dec_layers: 6,
            n_heads: 8,
            d_ffn: 2048,
            dropout: 0.1,
            max_positions: 1024,
            acoustic: AcousticConfig {
                frame_dim: 768,
                n_conv_layers: 1,
                conv_kernel: 3,
                n_ctx_layers: 0,
            },
            subsampler: SubsamplerConfig::default(),
            vocab_size,
            tie_embeddings: true,
            ln_eps: 1e-5,
        }
    }

    /// Laptop-scale preset: d=64, 2+2 layers, 4 heads.
    pub fn desk(vocab_size: usize, frame_dim: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ffn: 256,
            dropout: 0.1,
            max_positions: 256,
            acoustic: AcousticConfig {
                frame_dim,
                n_conv_layers: 1,
                conv_kernel: 3,
                n_ctx_layers: 1,
            },
            subsampler: SubsamplerConfig::default(),
            vocab_size,
            tie_embeddings: true,
            ln_eps: 1e-5,
        }
    }

    /// Smallest useful model, for gradient checks.
    pub fn tiny(vocab_size: usize, frame_dim: usize) -> Self {
        ModelConfig {
            d_model: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_ffn: 16,
            dropout: 0.0,
            max_positions: 64,
            acoustic: AcousticConfig {
                frame_dim,
                n_conv_layers: 1,
                conv_kernel: 3,
                n_ctx_layers: 1,
            },
            subsampler: SubsamplerConfig::default(),
            vocab_size,
            tie_embeddings: true,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < 6 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.acoustic.frame_dim == 0 || self.acoustic.conv_kernel % 2 == 0 {
            return bad("acoustic frame_dim must be >= 1 and conv_kernel odd".into());
        }
        if self.subsampler.kernel == 0 || self.subsampler.stride == 0 {
            return bad("subsampler kernel and stride must be >= 1".into());
        }
        if self.d_ffn == 0 || self.max_positions < 2 {
            return bad("d_ffn must be >= 1 and max_positions >= 2".into());
        }
        Ok(())
    }

    /// `(key, value)` pairs in a stable order, for config echoes and
    /// checkpoint metadata.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("d_model".into(), self.d_model.to_string()),
            ("n_enc_layers".into(), self.n_enc_layers.to_string()),
            ("n_dec_layers".into(), self.n_dec_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ffn".into(), self.d_ffn.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("max_positions".into(), self.max_positions.to_string()),
            ("frame_dim".into(), self.acoustic.frame_dim.to_string()),
            ("acoustic_conv_layers".into(), self.acoustic.n_conv_layers.to_string()),
            ("acoustic_conv_kernel".into(), self.acoustic.conv_kernel.to_string()),
            ("acoustic_ctx_layers".into(), self.acoustic.n_ctx_layers.to_string()),
            ("subsample_kernel".into(), self.subsampler.kernel.to_string()),
            ("subsample_stride".into(), self.subsampler.stride.to_string()),
            ("subsample_layers".into(), self.subsampler.n_layers.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("tie_embeddings".into(), self.tie_embeddings.to_string()),
            ("ln_eps".into(), self.ln_eps.to_string()),
        ]
    }

    /// Inverse of [`ModelConfig::to_pairs`]; unknown keys are errors.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = ModelConfig::desk(6, 1);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one field by its key name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "d_model" => self.d_model = p(key, value)?,
            "n_enc_layers" => self.n_enc_layers = p(key, value)?,
            "n_dec_layers" => self.n_dec_layers = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "d_ffn" => self.d_ffn = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "max_positions" => self.max_positions = p(key, value)?,
            "frame_dim" => self.acoustic.frame_dim = p(key, value)?,
            "acoustic_conv_layers" => self.acoustic.n_conv_layers = p(key, value)?,
            "acoustic_conv_kernel" => self.acoustic.conv_kernel = p(key, value)?,
            "acoustic_ctx_layers" => self.acoustic.n_ctx_layers = p(key, value)?,
            "subsample_kernel" => self.subsampler.kernel = p(key, value)?,
            "subsample_stride" => self.subsampler.stride = p(key, value)?,
            "subsample_layers" => self.subsampler.n_layers = p(key, value)?,
            "vocab_size" => self.vocab_size = p(key, value)?,
            "tie_embeddings" => self.tie_embeddings = p(key, value)?,
            "ln_eps" => self.ln_eps = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }
}
