//! Raw slice kernels shared by the eager tensor API and the tape.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use crate::error::{dim_err, NumError, Result};
use crate::scalar::Scalar;

static THREAD_OVERRIDE: AtomicUsize = AtomicUsize::new(0);
static THREAD_ENV: OnceLock<usize> = OnceLock::new();

/// Intra-op parallelism: `set_threads` override, else `DEXLAB_THREADS`, else 1.
pub fn threads() -> usize {
    match THREAD_OVERRIDE.load(Ordering::Relaxed) {
        0 => *THREAD_ENV.get_or_init(|| {
            std::env::var("DEXLAB_THREADS")
                .ok()
                .and_then(|s| s.trim().parse::<usize>().ok())
                .filter(|&n| n > 0)
                .unwrap_or(1)
        }),
        n => n,
    }
}

pub fn set_threads(n: usize) {
    THREAD_OVERRIDE.store(n, Ordering::Relaxed);
}

/// Rows below which splitting a product across threads is not worth it.
const PAR_MIN_ROWS: usize = 64;

/// `c = op(a) * op(b) + beta * c`.
///
/// `a` is stored `m x k` (or `k x m` when `a_t`), `b` is `k x n` (or
/// `n x k` when `b_t`), `c` is `m x n`. Parallel runs split output rows, so
/// every element is reduced in the same order for any thread count.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) -> Result<()> {
    if a.len() != m * k || b.len() != k * n || c.len() != m * n {
        return Err(dim_err(
            "gemm",
            format!(
                "m={m} k={k} n={n} but buffers hold a={} b={} c={}",
                a.len(),
                b.len(),
                c.len()
            ),
        ));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let workers = threads().min(m / PAR_MIN_ROWS).max(1);
    if workers == 1 {
        // SAFETY: extents were validated against the slice lengths above.
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                T::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return Ok(());
    }
    let rows_per = m.div_ceil(workers);
    std::thread::scope(|s| {
        for (chunk_idx, c_chunk) in c.chunks_mut(rows_per * n).enumerate() {
            let r0 = chunk_idx * rows_per;
            let rows = c_chunk.len() / n;
            s.spawn(move || {
                let a_off = if a_t { r0 } else { r0 * k };
                // SAFETY: the chunk covers rows r0..r0+rows of c, and the
                // offset pointer into `a` addresses exactly those rows.
                unsafe {
                    T::gemm_raw(
                        rows,
                        k,
                        n,
                        T::one(),
                        a.as_ptr().add(a_off),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c_chunk.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
        }
    });
    Ok(())
}

/// Which keys a query row may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    /// Row `i` sees columns `0..=i`.
    Causal,
    /// Explicit `rows x cols` visibility, `true` = visible.
    Dense(Vec<bool>),
}

impl Mask {
    pub fn visible(&self, cols: usize, i: usize, j: usize) -> bool {
        match self {
            Mask::Causal => j <= i,
            Mask::Dense(v) => v[i * cols + j],
        }
    }
}

/// Row-wise softmax over visible entries; hidden entries become exactly 0.
pub fn softmax_rows_masked<T: Scalar>(
    logits: &[T],
    rows: usize,
    cols: usize,
    mask: &Mask,
) -> Result<Vec<T>> {
    if let Mask::Dense(v) = mask {
        if v.len() != rows * cols {
            return Err(dim_err("row_softmax_masked", "mask shape differs from logits"));
        }
    }
    if let Mask::Causal = mask {
        // Each entry is written once: the visible prefix by the softmax, the
        // hidden tail with zeros.
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let len = (i + 1).min(cols);
            let row = &logits[i * cols..i * cols + len];
            let max = lane_max(row);
            let start = out.len();
            out.extend(row.iter().map(|&x| (x - max).exp_kernel()));
            normalize(&mut out[start..]);
            out.resize(start + cols, T::zero());
        }
        return Ok(out);
    }
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let row = &logits[i * cols..(i + 1) * cols];
        let dst = &mut out[i * cols..(i + 1) * cols];
        let mut max = T::neg_infinity();
        for j in 0..cols {
            if mask.visible(cols, i, j) && row[j] > max {
                max = row[j];
            }
        }
        if max == T::neg_infinity() {
            return Err(NumError::Contract(format!(
                "row_softmax_masked: row {i} has no visible key"
            )));
        }
        let mut sum = T::zero();
        for j in 0..cols {
            if mask.visible(cols, i, j) {
                let e = (row[j] - max).exp_kernel();
                dst[j] = e;
                sum = sum + e;
            }
        }
        let inv = T::one() / sum;
        dst.iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok(out)
}

const LANES: usize = 8;

/// Max and sum run over `LANES` independent accumulators so that the
/// compiler can keep them in vector registers.
#[inline]
fn lane_max<T: Scalar>(row: &[T]) -> T {
    let mut m = [T::neg_infinity(); LANES];
    let chunks = row.chunks_exact(LANES);
    for &x in chunks.remainder() {
        m[0] = if x > m[0] { x } else { m[0] };
    }
    for c in chunks {
        for i in 0..LANES {
            m[i] = if c[i] > m[i] { c[i] } else { m[i] };
        }
    }
    m.iter().copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
}

/// Scales `row` to sum to one.
#[inline]
fn normalize<T: Scalar>(row: &mut [T]) {
    let mut acc = [T::zero(); LANES];
    let chunks = row.chunks_exact(LANES);
    for &x in chunks.remainder() {
        acc[0] = acc[0] + x;
    }
    for c in chunks {
        for i in 0..LANES {
            acc[i] = acc[i] + c[i];
        }
    }
    let inv = T::one() / acc.iter().copied().fold(T::zero(), |a, b| a + b);
    row.iter_mut().for_each(|v| *v = *v * inv);
}

/// Backward of a row softmax: `dx = p * (dy - <dy, p>)` per row.
pub fn softmax_rows_backward<T: Scalar>(p: &[T], dy: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let pr = &p[i * cols..(i + 1) * cols];
        let gr = &dy[i * cols..(i + 1) * cols];
        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &pv), &gv) in dx[i * cols..(i + 1) * cols].iter_mut().zip(pr).zip(gr) {
            *d = pv * (gv - dot);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c).unwrap();
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c).unwrap();
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c).unwrap();
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn gemm_rejects_bad_extents() {
        let mut c = [0.0f32; 4];
        assert!(gemm(2, 3, 2, &[0.0f32; 4], false, &[0.0; 6], false, 0.0, &mut c).is_err());
    }

    #[test]
    fn gemm_bitwise_stable_across_thread_counts() {
        let m = 200;
        let k = 37;
        let n = 29;
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7919) % 101) as f32 * 0.013 - 0.6).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 104729) % 97) as f32 * 0.021 - 1.0).collect();
        let mut c1 = vec![0.0f32; m * n];
        let mut c3 = vec![0.0f32; m * n];
        set_threads(1);
        gemm(m, k, n, &a, false, &b, false, 0.0, &mut c1).unwrap();
        set_threads(3);
        gemm(m, k, n, &a, false, &b, false, 0.0, &mut c3).unwrap();
        set_threads(0);
        assert!(c1.iter().zip(&c3).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn dense_mask_all_hidden_row_is_contract_error() {
        let mask = Mask::Dense(vec![true, false, false, false]);
        let err = softmax_rows_masked(&[0.0f64; 4], 2, 2, &mask).unwrap_err();
        assert!(matches!(err, NumError::Contract(_)));
    }
}
