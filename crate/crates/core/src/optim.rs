//! First-order optimizers over named matrices.

use serde::{Deserialize, Serialize};

use crate::error::{HvplError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct OptimState {
    kind: OptimizerKind,
    m: Option<Matrix>,
    v: Option<Matrix>,
    steps: u64,
}

impl OptimState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimState {
            kind,
            m: None,
            v: None,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update of `param` along `grad`.
    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(HvplError::shape(
                "optimizer step",
                format!("parameter {:?}, gradient {:?}", param.shape(), grad.shape()),
            ));
        }
        if !grad.is_finite() {
            return Err(HvplError::Numeric("non-finite gradient".into()));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let (rows, cols) = grad.shape();
                let m = self.m.get_or_insert_with(|| Matrix::zeros(rows, cols));
                let v = self.v.get_or_insert_with(|| Matrix::zeros(rows, cols));
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_plain_descent() {
        let mut p = Matrix::filled(2, 3, 1.0);
        let mut s = OptimState::new(OptimizerKind::Sgd { lr: 0.1 });
        s.step(&mut p, &Matrix::filled(2, 3, 1.0)).unwrap();
        assert_eq!(p, Matrix::filled(2, 3, 0.9));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let mut s = OptimState::new(OptimizerKind::adam(0.01));
        s.step(&mut p, &Matrix::from_rows(&[vec![3.0, -0.5]]).unwrap()).unwrap();
        assert!((p.get(0, 0) - 0.99).abs() < 1e-8);
        assert!((p.get(0, 1) + 0.99).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = Matrix::zeros(1, 1);
        let mut s = OptimState::new(OptimizerKind::adam(0.01));
        let err = s.step(&mut p, &Matrix::filled(1, 1, f64::NAN)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
