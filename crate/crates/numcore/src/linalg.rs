//! Dense decompositions, always evaluated in double precision.

use crate::error::{dim_err, NumError, Result};
use crate::scalar::Scalar;
use crate::tensor::{check_finite, Tensor};

pub const MAX_SWEEPS: usize = 100;

/// Thin SVD `a = u * diag(s) * v^T` with `s` sorted descending.
///
/// For an `m x n` input with `k = min(m, n)`: `u` is `m x k`, `v` is `n x k`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor<f64>,
    pub s: Vec<f64>,
    pub v: Tensor<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor<f64> {
        let (m, k) = self.u.dims2().expect("matrix");
        let (n, _) = self.v.dims2().expect("matrix");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += self.u.at(i, l) * self.s[l] * self.v.at(j, l);
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(&[m, n], out).expect("shape")
    }
}

/// One-sided Jacobi SVD.
pub fn svd<T: Scalar>(a: &Tensor<T>) -> Result<Svd> {
    let (m, n) = a.dims2()?;
    check_finite("svd", a.data())?;
    if m < n {
        let t = svd(&a.transpose()?)?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    // Columns of the working copy, rotated until mutually orthogonal.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.at(i, j).f64()).collect())
        .collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    // Rounding keeps |gamma| / sqrt(alpha beta) near m * eps once columns are
    // orthogonal, so a tighter threshold can stall forever.
    let tol = (m as f64) * f64::EPSILON;
    // Columns this small are rounding noise of a rank-deficient input; they
    // can never be made orthogonal in relative terms, so leave them be.
    let frob2: f64 = cols.iter().flatten().map(|v| v * v).sum();
    let negligible = tol * tol * frob2;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (up, uq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += up[i] * up[i];
                        be += uq[i] * uq[i];
                        ga += up[i] * uq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0
                    || alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(NumError::NoConvergence {
            op: "svd",
            iterations: MAX_SWEEPS,
        });
    }
    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (c.iter().map(|v| v * v).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut u = vec![0.0; m * n];
    let mut v = vec![0.0; n * n];
    let mut s = Vec::with_capacity(n);
    for (dst, &(sigma, j)) in order.iter().enumerate() {
        s.push(sigma);
        for i in 0..m {
            u[i * n + dst] = if sigma > 0.0 { cols[j][i] / sigma } else { 0.0 };
        }
        for i in 0..n {
            v[i * n + dst] = vcols[j][i];
        }
    }
    Ok(Svd {
        u: Tensor::new(&[m, n], u)?,
        s,
        v: Tensor::new(&[n, n], v)?,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Moore-Penrose pseudoinverse; singular values at or below
/// `rcond * s_max` are treated as zero.
pub fn pinv<T: Scalar>(a: &Tensor<T>, rcond: f64) -> Result<Tensor<f64>> {
    if !(rcond >= 0.0) {
        return Err(NumError::Domain {
            op: "pinv",
            detail: format!("rcond must be non-negative, got {rcond}"),
        });
    }
    let (m, n) = a.dims2()?;
    let d = svd(a)?;
    let k = d.s.len();
    let cutoff = rcond * d.s.first().copied().unwrap_or(0.0);
    let inv: Vec<f64> = d
        .s
        .iter()
        .map(|&s| if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 })
        .collect();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += d.v.at(i, l) * inv[l] * d.u.at(j, l);
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new(&[n, m], out)
}

/// Numerical rank at relative threshold `rcond`.
pub fn rank<T: Scalar>(a: &Tensor<T>, rcond: f64) -> Result<usize> {
    let s = svd(a)?.s;
    let cutoff = rcond * s.first().copied().unwrap_or(0.0);
    Ok(s.iter().filter(|&&v| v > cutoff && v > 0.0).count())
}

/// `a * b` in f64 without going through the tape.
pub fn matmul_f64(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err("matmul", format!("{m}x{k} times {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    crate::kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out)?;
    Tensor::new(&[m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_svd() {
        let a = Tensor::<f64>::from_rows(&[vec![3.0, 0.0], vec![0.0, -5.0]]).unwrap();
        let d = svd(&a).unwrap();
        assert!((d.s[0] - 5.0).abs() < 1e-12);
        assert!((d.s[1] - 3.0).abs() < 1e-12);
        assert!(d.reconstruct().max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn wide_matrix_reconstructs() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.5]]).unwrap();
        let d = svd(&a).unwrap();
        assert_eq!(d.u.shape(), &[2, 2]);
        assert_eq!(d.v.shape(), &[3, 2]);
        assert!(d.reconstruct().max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn pinv_of_rank_one() {
        // [[1,2],[2,4]]^+ = [[1,2],[2,4]] / 25
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let p = pinv(&a, 1e-10).unwrap();
        let want = [0.04, 0.08, 0.08, 0.16];
        for (g, w) in p.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        assert_eq!(rank(&a, 1e-10).unwrap(), 1);
    }

    #[test]
    fn pinv_rejects_negative_rcond() {
        let a = Tensor::<f64>::eye(2);
        assert!(matches!(pinv(&a, -1.0), Err(NumError::Domain { .. })));
    }

    #[test]
    fn repeated_rows_converge() {
        // Value matrices of prompts with few distinct tokens: many rows, low
        // rank, so several columns end as rounding noise.
        let mut rng = crate::Rng::for_purpose(0, "linalg.repeated");
        for case in 0..40 {
            let (m, n, distinct) = (32 + 32 * (case % 8), 16, 1 + case % 12);
            let rows: Vec<Vec<f32>> = (0..distinct).map(|_| rng.normal_vec::<f32>(n, 1.0)).collect();
            let data: Vec<f64> = (0..m)
                .flat_map(|_| rows[rng.below(distinct)].iter().map(|&x| x as f64).collect::<Vec<_>>())
                .collect();
            let a = Tensor::new(&[m, n], data).unwrap();
            let d = svd(&a).unwrap();
            assert!(d.reconstruct().max_abs_diff(&a) < 1e-10, "case {case}");
            assert!(rank(&a, 1e-10).unwrap() <= distinct);
        }
    }
}
