//! Numerical reference tools: dense finite-difference Jacobians and exact
//! log|det| of small matrices. Test-oracle material, never used in training.

use super::Tensor;
use crate::error::{FlowError, Result};

/// Dense Jacobian of `f` at `x0` by central differences, as a rank-2 tensor
/// of shape (out_dim, in_dim). `f` must be deterministic and fixed-shape.
pub fn finite_diff_jacobian(
    f: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    x0: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(FlowError::Contract(format!("finite_diff_jacobian wants eps > 0, got {eps}")));
    }
    let n = x0.len();
    let base = f(x0)?;
    let m = base.len();
    let mut jac = vec![0.0; m * n];
    for j in 0..n {
        let mut plus = x0.data().to_vec();
        let mut minus = x0.data().to_vec();
        plus[j] += eps;
        minus[j] -= eps;
        let fp = f(&Tensor::new(x0.shape().to_vec(), plus)?)?;
        let fm = f(&Tensor::new(x0.shape().to_vec(), minus)?)?;
        if fp.len() != m || fm.len() != m {
            return Err(FlowError::Contract(format!(
                "finite_diff_jacobian: output size changed ({} -> {}/{})",
                m,
                fp.len(),
                fm.len()
            )));
        }
        for i in 0..m {
            jac[i * n + j] = (fp.data()[i] - fm.data()[i]) / (2.0 * eps);
        }
    }
    Tensor::new(vec![m, n], jac)
}

/// log|det A| of a square rank-2 tensor via LU with partial pivoting.
pub fn log_abs_det(a: &Tensor) -> Result<f64> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(FlowError::Dim(format!(
            "log_abs_det wants a square matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.shape()[0];
    let mut m = a.data().to_vec();
    let mut log_det = 0.0;
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for r in col + 1..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return Err(FlowError::Numerical("log_abs_det: singular matrix".into()));
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
        }
        let d = m[col * n + col];
        log_det += d.abs().ln();
        for r in col + 1..n {
            let factor = m[r * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[r * n + k] -= factor * m[col * n + k];
            }
        }
    }
    Ok(log_det)
}
