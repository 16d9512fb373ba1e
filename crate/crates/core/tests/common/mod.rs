//! Shared helpers for integration tests.
#![allow(dead_code)]

use magicflow_core::Tensor;

/// Mixed absolute/relative closeness: |a-b| <= atol + rtol*max(|a|,|b|).
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
}

pub fn assert_close(a: f64, b: f64, rtol: f64, atol: f64, what: &str) {
    assert!(
        close(a, b, rtol, atol),
        "{what}: {a} vs {b} (diff {})",
        (a - b).abs()
    );
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in max_abs_diff");
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}
