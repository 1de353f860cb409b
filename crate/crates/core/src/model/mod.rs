//! The bimodal encoder-decoder.
//!
//! Audio path: frames → acoustic context encoder (`c`) → two stride-2 GELU
//! convolutions (`e_s`) → `[audio]` embedding prepended. Text path:
//! `[lang]` tag prepended to the token embeddings. Both feed one shared
//! pre-LN Transformer encoder-decoder whose decoder starts from the
//! output-language tag.

mod config;
mod params;
mod session;

use std::collections::BTreeMap;

pub use config::{AcousticConfig, ModelConfig, SubsamplerConfig};
pub use params::ParamStore;
pub use session::{Seq, Session};

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Model configuration plus its named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct XstNetModel<F: Element = f32> {
    config: ModelConfig,
    params: ParamStore<F>,
    positions: Tensor<F>,
}

impl<F: Element> XstNetModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = params::init_params(&config, seed);
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: ParamStore<F>) -> Self {
        let positions = sinusoid_table(config.max_positions, config.d_model);
        XstNetModel {
            config,
            params,
            positions,
        }
    }

    /// Builds a model from existing tensors; every expected name must be
    /// present with the expected shape and no others may appear.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let specs = params::param_specs(&config);
        for (name, shape, _) in &specs {
            match params.get(name) {
                None => {
                    return Err(Error::Checkpoint {
                        name: name.clone(),
                        message: "missing".into(),
                    })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint {
                        name: name.clone(),
                        message: format!("shape {:?} does not match config shape {:?}", t.shape(), shape),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !specs.iter().any(|(n, _, _)| n == *k)) {
            return Err(Error::Checkpoint {
                name: extra.clone(),
                message: "unknown parameter name".into(),
            });
        }
        Ok(Self::assemble(config, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<F> {
        self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub(crate) fn positions(&self) -> &Tensor<F> {
        &self.positions
    }

    pub fn cast<G: Element>(&self) -> XstNetModel<G> {
        let params: BTreeMap<String, Tensor<G>> = self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        XstNetModel::assemble(self.config.clone(), params)
    }

    /// Session that records no gradients and applies no dropout.
    pub fn eval_session(&self) -> Session<'_, F> {
        Session::new(self, false, None)
    }

    /// Session whose parameters receive gradients; dropout draws from `seed`.
    pub fn train_session(&self, dropout_seed: Option<u64>) -> Session<'_, F> {
        Session::new(self, true, dropout_seed)
    }
}

/// Standard sinusoidal table `[n, d]`: sin on even, cos on odd channels.
pub fn sinusoid_table<F: Element>(n: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_parts(vec![n, d], data)
}
