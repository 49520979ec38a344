use std::collections::BTreeMap;

use dexlab_numcore::{Scalar, Tensor};

use crate::error::{CoreError, Result};
use crate::model::Parameter;

use super::TrainConfig;

pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moments for the parameters that have been stepped so far.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for OptimizerState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to `min_lr_ratio * peak_lr`
/// at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps;
    let warm = ((cfg.warmup_ratio * total as f64).round() as usize).min(total);
    let peak = cfg.peak_lr;
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    let floor = cfg.min_lr_ratio * peak;
    let progress = if total > warm {
        ((step - warm) as f64 / (total - warm) as f64).min(1.0)
    } else {
        1.0
    };
    peak - (peak - floor) * 0.5 * (1.0 - (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm of `grads`; errors on the first non-finite entry.
pub fn grad_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> Result<f64> {
    let mut sq = 0.0;
    for (name, g) in grads {
        for &x in g.data() {
            let x = x.f64();
            if !x.is_finite() {
                return Err(CoreError::NonFiniteGrad { param: name.clone() });
            }
            sq += x * x;
        }
    }
    Ok(sq.sqrt())
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(grads)?;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = T::of(x.f64() * s));
        }
    }
    Ok(norm)
}

/// One decoupled-weight-decay Adam update. Only parameters that are
/// trainable and present in `grads` move; decay applies to matrices only.
pub fn adamw_step<T: Scalar>(
    params: &mut BTreeMap<String, Parameter<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let [b1, b2] = cfg.betas;
    state.step += 1;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else { continue };
        if !p.trainable {
            continue;
        }
        let shape = p.tensor.shape().to_vec();
        let decay = if shape.len() >= 2 { cfg.weight_decay } else { 0.0 };
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let (pd, md, vd) = (p.tensor.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i].f64();
            let mi = b1 * md[i].f64() + (1.0 - b1) * gi;
            let vi = b2 * vd[i].f64() + (1.0 - b2) * gi * gi;
            md[i] = T::of(mi);
            vd[i] = T::of(vi);
            let upd = (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            let w = pd[i].f64();
            pd[i] = T::of(w - lr * (upd + decay * w));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: Tensor<f64>) -> BTreeMap<String, Parameter<f64>> {
        BTreeMap::from([(
            name.to_string(),
            Parameter {
                tensor: v,
                trainable: true,
            },
        )])
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            total_steps: 1000,
            warmup_ratio: 0.03,
            min_lr_ratio: 0.1,
            peak_lr: 3e-4,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(30, &cfg), 3e-4);
        assert!((lr_at(1000, &cfg) - 3e-5).abs() < 1e-18);
        assert!((lr_at(15, &cfg) - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let mut p = one("w", w.clone());
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2, 2]))]);
        adamw_step(&mut p, &g, &mut OptimizerState::default(), 1e-2, &cfg).unwrap();
        assert_eq!(p["w"].tensor, w);
    }

    #[test]
    fn decay_only_shrinks() {
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let w = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let mut p = one("w", w.clone());
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros(&[1, 2]))]);
        adamw_step(&mut p, &g, &mut OptimizerState::default(), 0.01, &cfg).unwrap();
        let want = w.map(|x| x * (1.0 - 0.01 * 0.1));
        assert!(p["w"].tensor.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn quadratic_converges() {
        let cfg = TrainConfig {
            total_steps: 200,
            peak_lr: 0.5,
            warmup_ratio: 0.0,
            min_lr_ratio: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = one("theta", Tensor::scalar(-2.0));
        let mut st = OptimizerState::default();
        for s in 0..200 {
            let th = p["theta"].tensor.item();
            let g = BTreeMap::from([("theta".to_string(), Tensor::scalar(2.0 * (th - 3.0)))]);
            adamw_step(&mut p, &g, &mut st, lr_at(s, &cfg), &cfg).unwrap();
        }
        assert!((p["theta"].tensor.item() - 3.0).abs() < 1e-3, "{}", p["theta"].tensor.item());
    }

    #[test]
    fn clipping_bounds_norm_and_flags_nan() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::<f64>::from_rows(&[vec![3.0, 4.0]]).unwrap()),
            ("b".to_string(), Tensor::scalar(12.0)),
        ]);
        let n = clip_grad_norm(&mut g, 1.0).unwrap();
        assert_eq!(n, 13.0);
        assert!(grad_norm(&g).unwrap() <= 1.0 + 1e-12);
        g.insert("c".into(), Tensor::scalar(f64::NAN));
        match clip_grad_norm(&mut g, 1.0) {
            Err(CoreError::NonFiniteGrad { param }) => assert_eq!(param, "c"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn frozen_untouched() {
        let cfg = TrainConfig::default();
        let mut p = one("w", Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        p.get_mut("w").unwrap().trainable = false;
        let g = BTreeMap::from([("w".to_string(), Tensor::ones(&[1, 2]))]);
        let mut st = OptimizerState::default();
        adamw_step(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p["w"].tensor.data(), &[1.0, 1.0]);
        assert!(st.m.is_empty());
    }
}
