//! Decoder-only transformer: pre-norm blocks, rotary positions, SwiGLU
//! feed-forward, grouped key/value heads, and three attention variants.

mod config;
mod forward;

use std::collections::BTreeMap;

use dexlab_numcore::{Rng, Scalar, Tensor};

use crate::dex::DexAdapter;
use crate::error::{config_err, input_err, Result};

pub use config::{Arch, HeadLayout, LambdaInit, ModelConfig};
pub use forward::{Forward, ForwardOptions, HeadTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// A block of token ids, `batch` rows of `seq` tokens each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn new(tokens: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 || tokens.len() != batch * seq {
            return Err(input_err(format!(
                "batch of {} tokens does not form {batch} rows of {seq}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, batch, seq })
    }

    pub fn from_rows<R: AsRef<[usize]>>(rows: &[R]) -> Result<Self> {
        let seq = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != seq) {
            return Err(input_err("batch rows differ in length"));
        }
        let tokens = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(tokens, rows.len(), seq)
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.tokens[b * self.seq..(b + 1) * self.seq]
    }

    /// The same batch with every row duplicated in place.
    pub fn repeat_rows(&self, times: usize) -> Self {
        let mut tokens = Vec::with_capacity(self.tokens.len() * times);
        for b in 0..self.batch {
            for _ in 0..times {
                tokens.extend_from_slice(self.row(b));
            }
        }
        Self {
            tokens,
            batch: self.batch * times,
            seq: self.seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Parameter<T>>,
    pub adapter: Option<DexAdapter>,
    /// Optimizer steps taken in the current phase; drives the lambda schedule.
    pub step: u64,
}

pub fn layer_name(layer: usize, leaf: &str) -> String {
    format!("layers.{layer}.{leaf}")
}

impl<T: Scalar> TransformerModel<T> {
    /// Fresh model with seeded normal weights and unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
            ("tok_emb".into(), vec![c.vocab_size, c.d_model], Init::Normal(1.0)),
            ("final_norm".into(), vec![c.d_model], Init::Ones),
            ("lm_head".into(), vec![c.d_model, c.vocab_size], Init::Normal(1.0)),
        ];
        let resid = 1.0 / ((2 * c.n_layers) as f64).sqrt();
        for l in 0..c.n_layers {
            let n = |leaf: &str| layer_name(l, leaf);
            specs.push((n("attn_norm"), vec![c.d_model], Init::Ones));
            specs.push((n("attn.wq"), vec![c.d_model, c.attn_width()], Init::Normal(1.0)));
            specs.push((n("attn.wk"), vec![c.d_model, c.kv_width()], Init::Normal(1.0)));
            specs.push((n("attn.wv"), vec![c.d_model, c.kv_width()], Init::Normal(1.0)));
            specs.push((n("attn.wo"), vec![c.attn_width(), c.d_model], Init::Normal(resid)));
            if c.arch == Arch::Diff {
                let lam = c.lambda_init.value(l);
                specs.push((n("attn.lambda"), vec![c.n_heads / 2], Init::Const(lam)));
            }
            specs.push((n("ffn_norm"), vec![c.d_model], Init::Ones));
            specs.push((n("ffn.w_gate"), vec![c.d_model, c.d_ff], Init::Normal(1.0)));
            specs.push((n("ffn.w_up"), vec![c.d_model, c.d_ff], Init::Normal(1.0)));
            specs.push((n("ffn.w_down"), vec![c.d_ff, c.d_model], Init::Normal(resid)));
        }
        let mut params = BTreeMap::new();
        for (name, shape, init) in specs {
            let numel: usize = shape.iter().product();
            let data = match init {
                Init::Ones => vec![T::one(); numel],
                Init::Const(v) => vec![T::of(v); numel],
                Init::Normal(scale) => Rng::for_purpose(seed, &format!("init.{name}"))
                    .normal_vec(numel, c.init_std * scale),
            };
            params.insert(
                name,
                Parameter {
                    tensor: Tensor::new(&shape, data)?,
                    trainable: true,
                },
            );
        }
        Ok(Self {
            config,
            params,
            adapter: None,
            step: 0,
        })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| config_err(format!("model has no parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| config_err(format!("model has no parameter {name}")))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        self.params.values_mut().for_each(|p| p.trainable = on);
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Attaches an adapter with zero `W_D` and its initial lambda scalars.
    pub fn attach_adapter(&mut self, adapter: DexAdapter) -> Result<()> {
        if !matches!(self.config.arch, Arch::Baseline | Arch::DexScratch) {
            return Err(config_err(format!(
                "adapter needs a baseline model, got {}",
                self.config.arch.name()
            )));
        }
        if self.adapter.is_some() {
            return Err(config_err("model already carries an adapter"));
        }
        adapter
            .selection
            .validate(self.config.n_layers, self.config.layout().heads)?;
        for (name, t) in adapter.param_specs(&self.config) {
            self.params.insert(
                name,
                Parameter {
                    tensor: t.cast(),
                    trainable: true,
                },
            );
        }
        self.adapter = Some(adapter);
        Ok(())
    }

    /// Current learnable lambda of one layer's adapter.
    pub fn lambda_learn(&self, layer: usize) -> Result<f64> {
        Ok(self.param(&DexAdapter::lambda_name(layer))?.item().f64())
    }

    /// Effective lambda of each layer at the model's current step.
    pub fn dex_lambdas(&self) -> Result<Vec<f64>> {
        let Some(a) = &self.adapter else {
            return Ok(vec![]);
        };
        (0..self.config.n_layers)
            .map(|l| Ok(a.schedule.value(l, self.step, self.lambda_learn(l)?)))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Parameter {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
            adapter: self.adapter.clone(),
            step: self.step,
        }
    }
}

enum Init {
    Ones,
    Const(f64),
    Normal(f64),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            n_kv_heads: 1,
            d_head: 8,
            d_ff: 32,
            ..Default::default()
        };
        let a = TransformerModel::<f32>::init(c.clone(), 1).unwrap();
        let b = TransformerModel::<f32>::init(c.clone(), 1).unwrap();
        let d = TransformerModel::<f32>::init(c, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.param("lm_head").unwrap(), d.param("lm_head").unwrap());
        assert_eq!(a.param("layers.0.attn.wk").unwrap().shape(), &[16, 8]);
    }

    #[test]
    fn diff_has_lambda_per_pair() {
        let c = ModelConfig {
            arch: Arch::Diff,
            ..Default::default()
        };
        let m = TransformerModel::<f32>::init(c, 0).unwrap();
        let lam = m.param("layers.0.attn.lambda").unwrap();
        assert_eq!(lam.shape(), &[4]);
        assert!((lam.data()[0] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn batch_shape_checked() {
        assert!(Batch::new(vec![1, 2, 3], 2, 2).is_err());
        let b = Batch::from_rows(&[vec![1, 2], vec![3, 4]]).unwrap();
        assert_eq!(b.repeat_rows(2).tokens, vec![1, 2, 1, 2, 3, 4, 3, 4]);
    }
}
