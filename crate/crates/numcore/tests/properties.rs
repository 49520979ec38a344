use std::rc::Rc;

use dexlab_numcore::linalg::{pinv, svd};
use dexlab_numcore::ops::row_softmax_masked;
use dexlab_numcore::{grad_check, Mask, RopeTable, Tensor, Var};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

fn shapes() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=8, 1usize..=8, 1usize..=8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_chain_gradients((m, k, n) in shapes(), seed in 0u64..1000) {
        let mut rng = dexlab_numcore::Rng::for_purpose(seed, "prop.matmul");
        let a = Tensor::new(&[m, k], rng.normal_vec(m * k, 1.0)).unwrap();
        let b = Tensor::new(&[k, n], rng.normal_vec(k * n, 1.0)).unwrap();
        let w = Tensor::new(&[m, n], rng.normal_vec(m * n, 1.0)).unwrap();
        let err = grad_check(
            |v| v[0].matmul(&v[1])?.silu()?.mul(&v[2])?.sum(),
            &[a, b, w],
            1e-6,
        ).unwrap();
        prop_assert!(err < 1e-6, "max rel error {}", err);
    }

    #[test]
    fn transposed_matmul_gradients((m, k, n) in shapes(), seed in 0u64..1000) {
        let mut rng = dexlab_numcore::Rng::for_purpose(seed, "prop.matmul_t");
        let a = Tensor::new(&[k, m], rng.normal_vec(m * k, 1.0)).unwrap();
        let b = Tensor::new(&[n, k], rng.normal_vec(k * n, 1.0)).unwrap();
        let err = grad_check(
            |v| v[0].matmul_t(&v[1], true, true)?.exp()?.mean(),
            &[a, b],
            1e-6,
        ).unwrap();
        prop_assert!(err < 1e-6, "max rel error {}", err);
    }

    #[test]
    fn attention_block_gradients(n in 1usize..=8, d in 1usize..=8, seed in 0u64..1000) {
        let mut rng = dexlab_numcore::Rng::for_purpose(seed, "prop.attn");
        let q = Tensor::new(&[n, d], rng.normal_vec(n * d, 1.0)).unwrap();
        let k = Tensor::new(&[n, d], rng.normal_vec(n * d, 1.0)).unwrap();
        let v = Tensor::new(&[n, d], rng.normal_vec(n * d, 1.0)).unwrap();
        let w = Tensor::new(&[n, d], rng.normal_vec(n * d, 1.0)).unwrap();
        let lam = Tensor::scalar(0.3);
        let err = grad_check(
            |x| {
                let p = x[0].matmul_nt(&x[1])?.softmax_masked(&Mask::Causal)?;
                let o = p.matmul(&x[2])?;
                let o2 = o.sub(&o.mul_scalar(&x[4])?)?;
                o2.mul(&x[3])?.sum()
            },
            &[q, k, v, w, lam],
            1e-6,
        ).unwrap();
        prop_assert!(err < 1e-6, "max rel error {}", err);
    }

    #[test]
    fn norm_rope_ce_gradients(rows in 1usize..=8, heads in 1usize..=3, seed in 0u64..1000) {
        let mut rng = dexlab_numcore::Rng::for_purpose(seed, "prop.norm");
        let hd = 4;
        let c = heads * hd;
        let x = Tensor::new(&[rows, c], rng.normal_vec(rows * c, 1.0)).unwrap();
        let g = Tensor::new(&[c], rng.normal_vec(c, 1.0)).unwrap();
        let table = Rc::new(RopeTable::new(hd, 3, 10000.0, 1).unwrap());
        let targets: Vec<usize> = (0..rows).map(|i| (i * 7 + seed as usize) % c).collect();
        let err = grad_check(
            |v| v[0].rms_norm(&v[1], 1e-6)?.rope(&table)?.cross_entropy(&targets),
            &[x, g],
            1e-6,
        ).unwrap();
        prop_assert!(err < 1e-6, "max rel error {}", err);
    }

    #[test]
    fn gather_slice_concat_gradients(rows in 2usize..=8, cols in 2usize..=8, seed in 0u64..1000) {
        let mut rng = dexlab_numcore::Rng::for_purpose(seed, "prop.gather");
        let table = Tensor::new(&[5, cols], rng.normal_vec(5 * cols, 1.0)).unwrap();
        let ids: Vec<usize> = (0..rows).map(|i| (i * 3 + 1) % 5).collect();
        let w = Tensor::new(&[rows, cols], rng.normal_vec(rows * cols, 1.0)).unwrap();
        let err = grad_check(
            |v| {
                let e = Var::embedding(&v[0], &ids)?;
                let l = e.block(0, rows, 0, 1)?;
                let r = e.block(0, rows, 1, cols - 1)?;
                let back = Var::concat_grid(&[vec![r, l]])?;
                back.mul(&v[1])?.log_safe_sum()
            },
            &[table, w],
            1e-6,
        ).unwrap();
        prop_assert!(err < 1e-6, "max rel error {}", err);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..=8, cols in 1usize..=8, x in prop::collection::vec(-30.0f64..30.0, 64)) {
        let t = Tensor::new(&[rows, cols], x[..rows * cols].to_vec()).unwrap();
        let dense: Vec<bool> = (0..rows * cols).map(|i| i % cols == 0 || i % 3 != 1).collect();
        for mask in [Mask::Causal, Mask::Dense(dense.clone())] {
            let p = row_softmax_masked(&t, &mask).unwrap();
            for i in 0..rows {
                let row = p.row(i);
                let visible = (0..cols).filter(|&j| mask.visible(cols, i, j)).count();
                if visible == 0 { continue; }
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                for j in 0..cols {
                    prop_assert!(row[j] >= 0.0);
                    if !mask.visible(cols, i, j) { prop_assert_eq!(row[j], 0.0); }
                }
            }
        }
    }

    #[test]
    fn svd_reconstructs(a in (1usize..=8, 1usize..=8).prop_flat_map(|(r, c)| matrix(r, c))) {
        let d = svd(&a).unwrap();
        prop_assert!(d.reconstruct().max_abs_diff(&a) < 1e-10);
        prop_assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pinv_solves_least_squares(a in (1usize..=8, 1usize..=8).prop_flat_map(|(r, c)| matrix(r, c)),
                                 bseed in 0u64..1000) {
        let (m, n) = a.dims2().unwrap();
        let mut rng = dexlab_numcore::Rng::for_purpose(bseed, "prop.pinv");
        let b: Vec<f64> = rng.normal_vec(m, 1.0);
        let p = pinv(&a, 1e-10).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (0..m).map(|j| p.at(i, j) * b[j]).sum()).collect();
        // Normal equations: A^T (A x - b) = 0.
        let resid: Vec<f64> = (0..m).map(|i| (0..n).map(|j| a.at(i, j) * x[j]).sum::<f64>() - b[i]).collect();
        for j in 0..n {
            let g: f64 = (0..m).map(|i| a.at(i, j) * resid[i]).sum();
            prop_assert!(g.abs() < 1e-7, "normal equation residual {}", g);
        }
        // Penrose: A A+ A = A.
        let mut apa = 0.0f64;
        for i in 0..m {
            for j in 0..n {
                let v: f64 = (0..n).map(|l| a.at(i, l) * (0..m).map(|r| p.at(l, r) * a.at(r, j)).sum::<f64>()).sum();
                apa = apa.max((v - a.at(i, j)).abs());
            }
        }
        prop_assert!(apa < 1e-8);
    }
}

trait LogSafeSum {
    fn log_safe_sum(&self) -> dexlab_numcore::Result<Var<f64>>;
}

impl LogSafeSum for Var<f64> {
    // exp keeps the log argument positive for any input.
    fn log_safe_sum(&self) -> dexlab_numcore::Result<Var<f64>> {
        self.scale(0.5)?.exp()?.affine(1.0, 1.0)?.log()?.sum()
    }
}

#[test]
fn f32_grads_match_f64_reference() {
    let mut rng = dexlab_numcore::Rng::for_purpose(3, "f32ref");
    let a64 = Tensor::<f64>::new(&[4, 6], rng.normal_vec(24, 1.0)).unwrap();
    let b64 = Tensor::<f64>::new(&[6, 3], rng.normal_vec(18, 1.0)).unwrap();
    let run = |a: Var<f64>, b: Var<f64>| {
        a.matmul(&b).unwrap().softmax_masked(&Mask::Causal).unwrap().exp().unwrap().sum().unwrap().backward().unwrap();
        a.grad().unwrap()
    };
    let g64 = run(Var::param(a64.clone()), Var::param(b64.clone()));
    let a32 = Var::param(a64.cast::<f32>());
    let b32 = Var::param(b64.cast::<f32>());
    a32.matmul(&b32).unwrap().softmax_masked(&Mask::Causal).unwrap().exp().unwrap().sum().unwrap().backward().unwrap();
    let g32 = a32.grad().unwrap();
    for (x, y) in g32.iter().zip(&g64) {
        assert!((*x as f64 - y).abs() < 1e-5);
    }
}
