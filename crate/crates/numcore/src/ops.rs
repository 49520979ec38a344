//! Eager tensor operations for callers that do not need gradients.

use crate::autodiff::{Unary, Var};
use crate::error::{dim_err, Result};
use crate::kernels::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(Var::constant(a.clone())
        .matmul(&Var::constant(b.clone()))?
        .into_value())
}

pub fn row_softmax_masked<T: Scalar>(logits: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    Ok(Var::constant(logits.clone()).softmax_masked(mask)?.into_value())
}

/// Elementwise operator set exposed on plain tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Abs,
    Silu,
}

impl Elementwise {
    pub fn arity(self) -> usize {
        match self {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        }
    }
}

pub fn elementwise<T: Scalar>(op: Elementwise, operands: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if operands.len() != op.arity() {
        return Err(dim_err(
            "elementwise",
            format!("{op:?} takes {} operands, got {}", op.arity(), operands.len()),
        ));
    }
    let a = Var::constant(operands[0].clone());
    let out = match op {
        Elementwise::Add => a.add(&Var::constant(operands[1].clone()))?,
        Elementwise::Sub => a.sub(&Var::constant(operands[1].clone()))?,
        Elementwise::Mul => a.mul(&Var::constant(operands[1].clone()))?,
        Elementwise::Exp => a.unary(Unary::Exp)?,
        Elementwise::Log => a.unary(Unary::Log)?,
        Elementwise::Abs => a.unary(Unary::Abs)?,
        Elementwise::Silu => a.unary(Unary::Silu)?,
    };
    Ok(out.into_value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::NumError;

    #[test]
    fn matmul_example() {
        let a = Tensor::<f32>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::<f32>::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        let c = Tensor::<f32>::zeros(&[3, 1]);
        assert!(matches!(matmul(&a, &c), Err(NumError::Dimension { .. })));
    }

    #[test]
    fn softmax_example() {
        let x = Tensor::<f64>::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let p = row_softmax_masked(&x, &Mask::Causal).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn nan_input_rejected() {
        let x = Tensor::<f64>::new(&[1, 2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(
            row_softmax_masked(&x, &Mask::Causal),
            Err(NumError::NonFinite { .. })
        ));
    }

    #[test]
    fn arity_checked() {
        let x = Tensor::<f64>::ones(&[2]);
        assert!(elementwise(Elementwise::Add, &[&x]).is_err());
        let y = elementwise(Elementwise::Silu, &[&x]).unwrap();
        assert!((y.data()[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    }
}
