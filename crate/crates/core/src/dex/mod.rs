//! Output-side differential adaptation of selected attention heads.
//!
//! A selected head's output `O` becomes `O - lambda(t) * O W_D`; everything
//! else in the block is left as is.

mod select;

use std::collections::BTreeSet;

use dexlab_numcore::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::model::{LambdaInit, ModelConfig, TransformerModel};

pub use select::{calibration_fingerprint, head_entropy, head_importance, select_heads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ImportanceLow,
    EntropyHigh,
    EntropyLow,
    All,
    /// Heads `0..k`; used when there is no trained model to score.
    FirstK,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.into())).ok()
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ImportanceLow => "importance_low",
            Strategy::EntropyHigh => "entropy_high",
            Strategy::EntropyLow => "entropy_low",
            Strategy::All => "all",
            Strategy::FirstK => "first_k",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WdScope {
    PerLayerShared,
    PerHead,
}

/// How lambda evolves over adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Ramp from 0 and hand over to the learnable scalar at step T.
    Annealed,
    /// Learnable scalar alone, starting at lambda_init.
    NoAnneal,
    /// Learnable scalar alone, starting at 0.
    ZeroInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DexConfig {
    /// Heads per layer; `None` means half of them.
    pub k: Option<usize>,
    pub strategy: Strategy,
    pub lambda_init: LambdaInit,
    /// Annealing length; `None` means 20% of the adaptation steps.
    pub t_anneal: Option<usize>,
    pub w_d_scope: WdScope,
    pub schedule: ScheduleMode,
    pub calib_batches: usize,
    pub calib_batch_size: usize,
}

impl Default for DexConfig {
    fn default() -> Self {
        Self {
            k: None,
            strategy: Strategy::EntropyHigh,
            lambda_init: LambdaInit::Constant(0.8),
            t_anneal: None,
            w_d_scope: WdScope::PerLayerShared,
            schedule: ScheduleMode::Annealed,
            calib_batches: 8,
            calib_batch_size: 16,
        }
    }
}

impl DexConfig {
    pub fn k_for(&self, heads: usize) -> Result<usize> {
        let k = self.k.unwrap_or((heads / 2).max(1));
        if k == 0 || k > heads {
            return Err(config_err(format!("dex.k must be in 1..={heads}, got {k}")));
        }
        Ok(k)
    }

    pub fn t_for(&self, total_steps: usize) -> Result<usize> {
        match self.t_anneal {
            Some(0) => Err(config_err("dex.t_anneal must be at least 1")),
            Some(t) => Ok(t),
            None => Ok((((total_steps as f64) * 0.2).round() as usize).max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    /// Selected head indices per layer, ascending.
    pub layers: Vec<Vec<usize>>,
    pub strategy: Strategy,
    /// Identifies the calibration data the scores came from.
    pub fingerprint: String,
}

impl HeadSelection {
    pub fn contains(&self, layer: usize, head: usize) -> bool {
        self.layers
            .get(layer)
            .is_some_and(|hs| hs.binary_search(&head).is_ok())
    }

    pub fn first_k(n_layers: usize, k: usize) -> Self {
        Self {
            layers: vec![(0..k).collect(); n_layers],
            strategy: Strategy::FirstK,
            fingerprint: String::new(),
        }
    }

    pub fn validate(&self, n_layers: usize, heads: usize) -> Result<()> {
        if self.layers.len() != n_layers {
            return Err(input_err(format!(
                "selection covers {} layers, model has {n_layers}",
                self.layers.len()
            )));
        }
        for (l, hs) in self.layers.iter().enumerate() {
            let set: BTreeSet<_> = hs.iter().copied().collect();
            if set.len() != hs.len() || hs.windows(2).any(|w| w[0] > w[1]) {
                return Err(input_err(format!("layer {l}: heads must be unique and ascending")));
            }
            if let Some(&h) = hs.iter().find(|&&h| h >= heads) {
                return Err(input_err(format!("layer {l}: head {h} >= {heads}")));
            }
        }
        Ok(())
    }
}

/// `(1 - a) (t/T) lambda_init + a lambda_learn` with `a = min(1, t/T)`.
pub fn lambda_at(t: f64, t_anneal: f64, lambda_init: f64, lambda_learn: f64) -> f64 {
    let (alpha, offset) = anneal_coefficients(t, t_anneal, lambda_init);
    offset + alpha * lambda_learn
}

/// `(alpha, offset)` so that `lambda = offset + alpha * lambda_learn`.
fn anneal_coefficients(t: f64, t_anneal: f64, lambda_init: f64) -> (f64, f64) {
    let r = t / t_anneal;
    let alpha = r.min(1.0);
    (alpha, (1.0 - alpha) * r * lambda_init)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub lambda_init: Vec<f64>,
    pub t_anneal: usize,
    pub mode: ScheduleMode,
}

impl LambdaSchedule {
    pub fn coefficients(&self, layer: usize, t: u64) -> (f64, f64) {
        match self.mode {
            ScheduleMode::Annealed => {
                anneal_coefficients(t as f64, self.t_anneal as f64, self.lambda_init[layer])
            }
            ScheduleMode::NoAnneal | ScheduleMode::ZeroInit => (1.0, 0.0),
        }
    }

    pub fn value(&self, layer: usize, t: u64, lambda_learn: f64) -> f64 {
        let (a, c) = self.coefficients(layer, t);
        c + a * lambda_learn
    }

    pub fn initial_learn(&self, layer: usize) -> f64 {
        match self.mode {
            ScheduleMode::NoAnneal => self.lambda_init[layer],
            ScheduleMode::Annealed | ScheduleMode::ZeroInit => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DexAdapter {
    pub selection: HeadSelection,
    pub schedule: LambdaSchedule,
    pub w_d_scope: WdScope,
}

impl DexAdapter {
    pub fn new(
        selection: HeadSelection,
        cfg: &DexConfig,
        model: &ModelConfig,
        total_steps: usize,
    ) -> Result<Self> {
        selection.validate(model.n_layers, model.layout().heads)?;
        Ok(Self {
            selection,
            schedule: LambdaSchedule {
                lambda_init: (0..model.n_layers).map(|l| cfg.lambda_init.value(l)).collect(),
                t_anneal: cfg.t_for(total_steps)?,
                mode: cfg.schedule,
            },
            w_d_scope: cfg.w_d_scope,
        })
    }

    pub fn w_d_name(&self, layer: usize, head: usize) -> String {
        match self.w_d_scope {
            WdScope::PerLayerShared => format!("layers.{layer}.dex.w_d"),
            WdScope::PerHead => format!("layers.{layer}.dex.w_d.{head}"),
        }
    }

    pub fn lambda_name(layer: usize) -> String {
        format!("layers.{layer}.dex.lambda_learn")
    }

    /// Adapter parameter names with their shapes and initial values.
    pub fn param_specs(&self, model: &ModelConfig) -> Vec<(String, Tensor<f64>)> {
        let dv = model.layout().v_dim;
        let mut out = Vec::new();
        for l in 0..model.n_layers {
            let mut names = BTreeSet::new();
            for &h in &self.selection.layers[l] {
                names.insert(self.w_d_name(l, h));
            }
            if self.w_d_scope == WdScope::PerLayerShared {
                names.insert(self.w_d_name(l, 0));
            }
            out.extend(names.into_iter().map(|n| (n, Tensor::zeros(&[dv, dv]))));
            out.push((
                Self::lambda_name(l),
                Tensor::scalar(self.schedule.initial_learn(l)),
            ));
        }
        out
    }
}

/// `o - lambda_t * o W_D` for selected heads, `o` itself otherwise.
pub fn apply_dex<T: Scalar>(
    o: &Var<T>,
    w_d: &Var<T>,
    lambda_t: &Var<T>,
    selected: bool,
) -> Result<Var<T>> {
    if !selected {
        return Ok(o.clone());
    }
    Ok(o.sub(&o.matmul(w_d)?.mul_scalar(lambda_t)?)?)
}

/// Eager form of [`apply_dex`] on plain tensors.
pub fn apply_dex_tensor<T: Scalar>(
    o: &Tensor<T>,
    adapter: &DexAdapter,
    w_d: &Tensor<T>,
    lambda_t: f64,
    layer: usize,
    head: usize,
    heads: usize,
) -> Result<Tensor<T>> {
    if head >= heads {
        return Err(input_err(format!("head {head} >= {heads}")));
    }
    let selected = adapter.selection.contains(layer, head);
    if !selected || lambda_t == 0.0 {
        return Ok(o.clone());
    }
    let out = apply_dex(
        &Var::constant(o.clone()),
        &Var::constant(w_d.clone()),
        &Var::constant(Tensor::scalar(T::of(lambda_t))),
        true,
    )?;
    Ok(out.into_value())
}

/// Marks exactly the adapted attention path trainable: key, value and
/// output projections plus the adapter itself.
pub fn freeze_policy<T: Scalar>(model: &mut TransformerModel<T>) -> Result<BTreeSet<String>> {
    if model.adapter.is_none() {
        return Err(config_err("freeze policy needs an attached adapter"));
    }
    let mut trainable = BTreeSet::new();
    for (name, p) in model.params.iter_mut() {
        let keep = name.ends_with(".attn.wk")
            || name.ends_with(".attn.wv")
            || name.ends_with(".attn.wo")
            || name.contains(".dex.");
        p.trainable = keep;
        if keep {
            trainable.insert(name.clone());
        }
    }
    Ok(trainable)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lambda_at(0.0, 1000.0, 0.8, 0.1), 0.0);
        assert_eq!(lambda_at(1000.0, 1000.0, 0.8, 0.1), 0.1);
        assert!((lambda_at(500.0, 1000.0, 0.8, 0.1) - 0.25).abs() < 1e-15);
        assert_eq!(lambda_at(5000.0, 1000.0, 0.8, -0.3), -0.3);
    }

    #[test]
    fn parabola_with_frozen_learn() {
        for t in 0..=100 {
            let r = t as f64 / 100.0;
            let want = (1.0 - r) * r * 0.6;
            assert!((lambda_at(t as f64, 100.0, 0.6, 0.0) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn continuity_at_t() {
        let (t, li, ll) = (50.0, 0.8, 0.3);
        let gap = (lambda_at(t - 1.0, t, li, ll) - lambda_at(t, t, li, ll)).abs();
        assert!(gap <= (li + ll.abs()) / t);
    }

    #[test]
    fn apply_dex_identities() {
        let o = Tensor::<f64>::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let sel = HeadSelection {
            layers: vec![vec![1]],
            strategy: Strategy::All,
            fingerprint: String::new(),
        };
        let adapter = DexAdapter {
            selection: sel,
            schedule: LambdaSchedule {
                lambda_init: vec![0.8],
                t_anneal: 10,
                mode: ScheduleMode::Annealed,
            },
            w_d_scope: WdScope::PerLayerShared,
        };
        let eye = Tensor::<f64>::eye(2);
        let same = apply_dex_tensor(&o, &adapter, &eye, 0.0, 0, 1, 2).unwrap();
        assert_eq!(same, o);
        let off = apply_dex_tensor(&o, &adapter, &eye, 1.0, 0, 0, 2).unwrap();
        assert_eq!(off, o);
        let gone = apply_dex_tensor(&o, &adapter, &eye, 1.0, 0, 1, 2).unwrap();
        assert!(gone.data().iter().all(|&v| v == 0.0));
        assert!(apply_dex_tensor(&o, &adapter, &eye, 1.0, 0, 2, 2).is_err());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in [
            Strategy::ImportanceLow,
            Strategy::EntropyHigh,
            Strategy::EntropyLow,
            Strategy::All,
            Strategy::FirstK,
        ] {
            assert_eq!(Strategy::parse(s.name()), Some(s));
        }
    }
}
