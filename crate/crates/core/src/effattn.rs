//! Score-level view of an adapted head: the matrix `X` with `X V ~ O'`
//! where `O' = A V (I - lambda W_D)`.

use std::collections::BTreeMap;

use dexlab_numcore::linalg::{matmul_f64, pinv, svd};
use dexlab_numcore::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, CoreError, Result};
use crate::model::{HeadTrace, TransformerModel};

pub const DEFAULT_RCOND: f64 = 1e-6;
pub const DEFAULT_ITERS: usize = 100;
pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pinv,
    Optim,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pinv" => Some(Method::Pinv),
            "optim" => Some(Method::Optim),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Pinv => "pinv",
            Method::Optim => "optim",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EffAttnResult {
    pub x: Tensor<f64>,
    /// `|X V - O'|_F`.
    pub residual: f64,
    pub method: Method,
    /// `s_max / s_min` of `V`; infinite when `V` is rank deficient.
    pub conditioning: f64,
    /// Squared residual before each descent step and after the last one.
    pub losses: Vec<f64>,
}

/// `O' = A V (I - lambda W_D)`.
pub fn adapted_output(
    a: &Tensor<f64>,
    v: &Tensor<f64>,
    w_d: &Tensor<f64>,
    lambda: f64,
) -> Result<Tensor<f64>> {
    let (n, n2) = a.dims2()?;
    let (nv, dv) = v.dims2()?;
    let (w1, w2) = w_d.dims2()?;
    if n != n2 || nv != n || w1 != dv || w2 != dv {
        return Err(input_err(format!(
            "effective attention needs A {n}x{n}, V {n}x d, W_D d x d; got A {n}x{n2}, V {nv}x{dv}, W_D {w1}x{w2}"
        )));
    }
    let o = matmul_f64(a, v)?;
    let owd = matmul_f64(&o, w_d)?;
    let data = o
        .data()
        .iter()
        .zip(owd.data())
        .map(|(&x, &y)| x - lambda * y)
        .collect();
    Ok(Tensor::new(o.shape(), data)?)
}

pub fn conditioning(v: &Tensor<f64>) -> Result<f64> {
    let s = svd(v)?.s;
    let (max, min) = (s[0], *s.last().expect("non-empty"));
    Ok(if min > 0.0 { max / min } else { f64::INFINITY })
}

fn residual(x: &Tensor<f64>, v: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64> {
    Ok(frob_diff(&matmul_f64(x, v)?, target))
}

fn frob_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Least-squares solution closest to `A`: `X = A + (O' - A V) V^+`.
/// Equals `O' V^+` when `V` is square and invertible. For `N > d_v` the plain
/// `O' V^+` projects `A` onto the row space of `V` and moves the map even when
/// `lambda W_D = 0`.
pub fn effective_scores_pinv(
    a: &Tensor<f64>,
    v: &Tensor<f64>,
    w_d: &Tensor<f64>,
    lambda: f64,
    rcond: f64,
) -> Result<EffAttnResult> {
    if !(rcond > 0.0 && rcond < 1.0) {
        return Err(input_err(format!("rcond must be in (0, 1), got {rcond}")));
    }
    let target = adapted_output(a, v, w_d, lambda)?;
    let x = matmul_f64(a, &effective_projector(v, w_d, lambda, rcond)?)?;
    let r = residual(&x, v, &target)?;
    Ok(EffAttnResult {
        x,
        residual: r,
        method: Method::Pinv,
        conditioning: conditioning(v)?,
        losses: vec![],
    })
}

/// Plain gradient descent on `|X V - O'|_F^2` starting from `X = A`.
pub fn effective_scores_optim(
    a: &Tensor<f64>,
    v: &Tensor<f64>,
    w_d: &Tensor<f64>,
    lambda: f64,
    iters: usize,
    lr: f64,
) -> Result<EffAttnResult> {
    if !(lr > 0.0) {
        return Err(input_err(format!("learning rate must be positive, got {lr}")));
    }
    let target = adapted_output(a, v, w_d, lambda)?;
    let (n, _) = a.dims2()?;
    let (_, dv) = v.dims2()?;
    let mut x = a.clone();
    let mut losses = Vec::with_capacity(iters + 1);
    let mut resid = vec![0.0; n * dv];
    let mut grad = vec![0.0; n * n];
    for it in 0..=iters {
        dexlab_numcore::kernels::gemm(n, n, dv, x.data(), false, v.data(), false, 0.0, &mut resid)?;
        for (r, t) in resid.iter_mut().zip(target.data()) {
            *r -= t;
        }
        let loss: f64 = resid.iter().map(|r| r * r).sum();
        if !loss.is_finite() || (it > 0 && loss > 10.0 * losses[0] && loss > 0.0) {
            return Err(CoreError::Diverged {
                op: "effective_scores_optim",
                detail: format!(
                    "loss grew from {:e} to {loss:e} at iteration {it}; use a smaller learning rate",
                    losses[0]
                ),
            });
        }
        losses.push(loss);
        if it == iters {
            break;
        }
        // d/dX |XV - T|^2 = 2 (XV - T) V^T
        dexlab_numcore::kernels::gemm(n, dv, n, &resid, false, v.data(), true, 0.0, &mut grad)?;
        for (xv, g) in x.data_mut().iter_mut().zip(&grad) {
            *xv -= lr * 2.0 * g;
        }
    }
    Ok(EffAttnResult {
        residual: losses.last().copied().unwrap_or(0.0).sqrt(),
        x,
        method: Method::Optim,
        conditioning: conditioning(v)?,
        losses,
    })
}

/// `|X1 - X2|_F / max(|X1|_F, 1e-12)`.
pub fn crosscheck(r1: &EffAttnResult, r2: &EffAttnResult) -> Result<f64> {
    if r1.x.shape() != r2.x.shape() {
        return Err(input_err(format!(
            "crosscheck: shapes {:?} and {:?} differ",
            r1.x.shape(),
            r2.x.shape()
        )));
    }
    Ok(frob_diff(&r1.x, &r2.x) / r1.x.frobenius().max(1e-12))
}

/// `P = I - lambda V W_D V^+`, so that the pinv effective map is `A P`.
/// Lets callers reuse one decomposition for many rows.
pub fn effective_projector(
    v: &Tensor<f64>,
    w_d: &Tensor<f64>,
    lambda: f64,
    rcond: f64,
) -> Result<Tensor<f64>> {
    let (n, dv) = v.dims2()?;
    let (w1, w2) = w_d.dims2()?;
    if w1 != dv || w2 != dv {
        return Err(input_err(format!("W_D must be {dv}x{dv}, got {w1}x{w2}")));
    }
    let vp = pinv(v, rcond)?;
    let vw = matmul_f64(v, w_d)?;
    let mut p = matmul_f64(&vw, &vp)?;
    for (i, e) in p.data_mut().iter_mut().enumerate() {
        *e = f64::from(u8::from(i / n == i % n)) - lambda * *e;
    }
    Ok(p)
}

/// Replaces the maps of adapted heads with their effective maps so that
/// map-level analyses see what the adapter does. Other heads are untouched.
pub fn effective_traces<T: Scalar>(
    model: &TransformerModel<T>,
    traces: &mut [HeadTrace],
    method: Method,
) -> Result<()> {
    let Some(adapter) = &model.adapter else {
        return Ok(());
    };
    let mut w_d: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    for t in traces.iter_mut().filter(|t| t.adapted) {
        let name = adapter.w_d_name(t.layer, t.head);
        if !w_d.contains_key(&name) {
            w_d.insert(name.clone(), model.param(&name)?.cast());
        }
        let w = &w_d[&name];
        t.scores = match method {
            Method::Pinv => matmul_f64(&t.scores, &effective_projector(&t.values, w, t.lambda, DEFAULT_RCOND)?)?,
            Method::Optim => {
                effective_scores_optim(&t.scores, &t.values, w, t.lambda, DEFAULT_ITERS, DEFAULT_LR)?.x
            }
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(rows: usize, cols: usize, seed: u64, std: f64) -> Tensor<f64> {
        let mut r = dexlab_numcore::Rng::for_purpose(seed, "effattn.test");
        Tensor::new(&[rows, cols], r.normal_vec(rows * cols, std)).unwrap()
    }

    fn softmaxish(n: usize, seed: u64) -> Tensor<f64> {
        let l = rand(n, n, seed, 1.0);
        dexlab_numcore::ops::row_softmax_masked(&l, &dexlab_numcore::Mask::Causal).unwrap()
    }

    #[test]
    fn identity_values_recover_a() {
        let a = softmaxish(5, 1);
        let r = effective_scores_pinv(&a, &Tensor::eye(5), &Tensor::zeros(&[5, 5]), 0.7, 1e-6).unwrap();
        assert!(r.x.max_abs_diff(&a) < 1e-10);
        assert!(r.residual < 1e-10);
    }

    #[test]
    fn zero_lambda_optim_stays_put() {
        let a = softmaxish(4, 2);
        let v = rand(4, 6, 3, 1.0);
        let r = effective_scores_optim(&a, &v, &rand(6, 6, 4, 1.0), 0.0, 100, 1e-3).unwrap();
        assert_eq!(r.x, a);
        assert!(r.losses.iter().all(|&l| l < 1e-24));
    }

    #[test]
    fn divergence_is_reported() {
        let a = softmaxish(4, 5);
        let v = rand(4, 8, 6, 10.0);
        let err = effective_scores_optim(&a, &v, &rand(8, 8, 7, 1.0), 0.5, 100, 1.0).unwrap_err();
        assert!(matches!(err, CoreError::Diverged { .. }));
    }

    #[test]
    fn tall_values_keep_a_without_adapter() {
        let a = softmaxish(7, 8);
        let v = rand(7, 3, 9, 1.0);
        let r = effective_scores_pinv(&a, &v, &rand(3, 3, 10, 0.3), 0.0, 1e-6).unwrap();
        assert!(r.x.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn same_residual_as_plain_pseudoinverse() {
        for (n, d) in [(7, 3), (4, 4), (3, 5)] {
            let a = softmaxish(n, 13);
            let v = rand(n, d, 14, 1.0);
            let w = rand(d, d, 15, 0.3);
            let r = effective_scores_pinv(&a, &v, &w, 0.4, 1e-9).unwrap();
            let target = adapted_output(&a, &v, &w, 0.4).unwrap();
            let plain = matmul_f64(&target, &pinv(&v, 1e-9).unwrap()).unwrap();
            assert!((r.residual - residual(&plain, &v, &target).unwrap()).abs() < 1e-10);
            if n == d {
                assert!(r.x.max_abs_diff(&plain) < 1e-9);
            }
        }
    }

    #[test]
    fn descent_from_a_reaches_pinv_on_tall_values() {
        let a = softmaxish(8, 16);
        let v = rand(8, 3, 17, 1.0);
        let w = rand(3, 3, 18, 0.5);
        let p = effective_scores_pinv(&a, &v, &w, 0.6, 1e-9).unwrap();
        let o = effective_scores_optim(&a, &v, &w, 0.6, 3000, 2e-2).unwrap();
        assert!(crosscheck(&p, &o).unwrap() < 1e-6);
    }

    #[test]
    fn crosscheck_shape_contract() {
        let a = softmaxish(4, 11);
        let r1 = effective_scores_pinv(&a, &Tensor::eye(4), &Tensor::zeros(&[4, 4]), 0.0, 1e-6).unwrap();
        assert_eq!(crosscheck(&r1, &r1).unwrap(), 0.0);
        let b = softmaxish(3, 12);
        let r2 = effective_scores_pinv(&b, &Tensor::eye(3), &Tensor::zeros(&[3, 3]), 0.0, 1e-6).unwrap();
        assert!(crosscheck(&r1, &r2).is_err());
    }
}
