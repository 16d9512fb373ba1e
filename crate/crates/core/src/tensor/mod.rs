//! Dense `f64` tensors of rank 1..=4 plus the pure kernels every higher
//! layer is built from.
//!
//! Tensors are immutable; ops allocate their output. Every op that can
//! produce a non-finite value scans its output and errors instead of letting
//! NaN/Inf propagate. Reductions run in flat index order, which pins the
//! floating-point result for a given input.

mod oracle;
mod rng;
mod tape;
mod ten_io;

pub use oracle::{finite_diff_jacobian, log_abs_det};
pub use rng::Rng;
pub use tape::{GradTape, Gradients, NodeId, ParamId, ParamStore, TraceSession};
pub use ten_io::{read_ten, write_ten};

use crate::error::{FlowError, Result};
use std::sync::Arc;

pub const MAX_RANK: usize = 4;

/// Immutable dense tensor. Cloning is cheap (shared buffer).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(FlowError::Dim(format!(
            "rank must be 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(FlowError::Dim(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    // Scan cheap relative to any op that allocated the buffer.
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        let at = data.iter().position(|v| !v.is_finite()).unwrap();
        Err(FlowError::NonFinite(format!(
            "{what}: element {at} is {}",
            data[at]
        )))
    }
}

impl Tensor {
    /// Build a tensor, validating shape, element count, and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        check_shape(&shape)?;
        if numel(&shape) != data.len() {
            return Err(FlowError::Dim(format!(
                "shape {shape:?} wants {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    /// Internal constructor for ops that cannot introduce non-finite values
    /// (permutations, slicing, copies of already-validated data).
    fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        Ok(Tensor::from_parts(shape.to_vec(), vec![0.0; numel(shape)]))
    }

    pub fn ones(shape: &[usize]) -> Result<Tensor> {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Tensor> {
        check_shape(shape)?;
        if !v.is_finite() {
            return Err(FlowError::NonFinite(format!("fill value {v}")));
        }
        Ok(Tensor::from_parts(shape.to_vec(), vec![v; numel(shape)]))
    }

    /// Rank-1 single-element tensor; the scalar convention used everywhere.
    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Tensor> {
        check_shape(shape)?;
        let data: Vec<f64> = (0..numel(shape)).map(&mut f).collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // zero-sized dims are rejected at construction
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn item(&self) -> Result<f64> {
        if self.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(FlowError::Dim(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(FlowError::Dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )))
        }
    }

    fn zip(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data, op)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    fn map(&self, op: &str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&a| f(a)).collect();
        check_finite(&data, op)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.map("add_scalar", |a| a + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        self.map("mul_scalar", |a| a * c)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.map("neg", |a| -a)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.map("exp", f64::exp)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.map("tanh", f64::tanh)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map("relu", |a| if a > 0.0 { a } else { 0.0 })
    }

    /// Sum of all elements, accumulated in flat index order.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in self.data.iter() {
            acc += v;
        }
        acc
    }

    /// Same buffer, new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        if numel(shape) != self.len() {
            return Err(FlowError::Dim(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    fn rank3(&self, op: &str) -> Result<(usize, usize, usize)> {
        if self.rank() == 3 {
            Ok((self.shape[0], self.shape[1], self.shape[2]))
        } else {
            Err(FlowError::Dim(format!(
                "{op} wants rank-3 (C,H,W), got {:?}",
                self.shape
            )))
        }
    }

    fn rank2(&self, op: &str) -> Result<(usize, usize)> {
        if self.rank() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(FlowError::Dim(format!(
                "{op} wants rank-2, got {:?}",
                self.shape
            )))
        }
    }

    /// Channels `from..to` of a (C,H,W) tensor.
    pub fn chan_slice(&self, from: usize, to: usize) -> Result<Tensor> {
        let (c, h, w) = self.rank3("chan_slice")?;
        if from >= to || to > c {
            return Err(FlowError::Dim(format!(
                "chan_slice {from}..{to} out of range for C={c}"
            )));
        }
        let data = self.data[from * h * w..to * h * w].to_vec();
        Ok(Tensor::from_parts(vec![to - from, h, w], data))
    }

    /// Channel concatenation of two (·,H,W) tensors.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (ca, h, w) = self.rank3("concat_channels")?;
        let (cb, h2, w2) = other.rank3("concat_channels")?;
        if (h, w) != (h2, w2) {
            return Err(FlowError::Dim(format!(
                "concat_channels: spatial dims {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor::from_parts(vec![ca + cb, h, w], data))
    }

    /// Space-to-depth by 2: (C,H,W) -> (4C,H/2,W/2).
    ///
    /// Output channels for input channel c are 4c+k with k ordered
    /// (top-left, top-right, bottom-left, bottom-right) sub-pixel.
    pub fn squeeze2x(&self) -> Result<Tensor> {
        let (c, h, w) = self.rank3("squeeze2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(FlowError::Dim(format!(
                "squeeze2x wants even H,W, got {:?}",
                self.shape
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            for k in 0..4 {
                let (du, dv) = (k / 2, k % 2);
                let co = 4 * ci + k;
                for i in 0..ho {
                    for j in 0..wo {
                        data[(co * ho + i) * wo + j] =
                            self.data[(ci * h + 2 * i + du) * w + 2 * j + dv];
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![4 * c, ho, wo], data))
    }

    /// Depth-to-space by 2; exact inverse of `squeeze2x`.
    pub fn unsqueeze2x(&self) -> Result<Tensor> {
        let (c, h, w) = self.rank3("unsqueeze2x")?;
        if c % 4 != 0 {
            return Err(FlowError::Dim(format!(
                "unsqueeze2x wants C divisible by 4, got {:?}",
                self.shape
            )));
        }
        let (co, ho, wo) = (c / 4, 2 * h, 2 * w);
        let mut data = vec![0.0; c * h * w];
        for ci in 0..co {
            for k in 0..4 {
                let (du, dv) = (k / 2, k % 2);
                let cs = 4 * ci + k;
                for i in 0..h {
                    for j in 0..w {
                        data[(ci * ho + 2 * i + du) * wo + 2 * j + dv] =
                            self.data[(cs * h + i) * w + j];
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![co, ho, wo], data))
    }

    /// Dense rank-2 matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, ka) = self.rank2("matmul")?;
        let (kb, n) = other.rank2("matmul")?;
        if ka != kb {
            return Err(FlowError::Dim(format!(
                "matmul: inner dims {ka} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..ka {
                let a = self.data[i * ka + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        check_finite(&out, "matmul")?;
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, n) = self.rank2("transpose2d")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], data))
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// input (Cin,H,W), kernel (Cout,Cin,kh,kw) with odd kh,kw;
    /// output (Cout, H+2ph-kh+1, W+2pw-kw+1).
    pub fn conv2d(&self, kernel: &Tensor, pad: (usize, usize)) -> Result<Tensor> {
        let (cin, h, w) = self.rank3("conv2d input")?;
        if kernel.rank() != 4 {
            return Err(FlowError::Dim(format!(
                "conv2d kernel wants rank-4, got {:?}",
                kernel.shape
            )));
        }
        let (co, ci, kh, kw) = (
            kernel.shape[0],
            kernel.shape[1],
            kernel.shape[2],
            kernel.shape[3],
        );
        if ci != cin {
            return Err(FlowError::Dim(format!(
                "conv2d: kernel Cin {ci} vs input Cin {cin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(FlowError::Contract(format!(
                "conv2d wants odd kernel dims, got {kh}x{kw}"
            )));
        }
        let (ph, pw) = pad;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(FlowError::Dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        let ho = h + 2 * ph - kh + 1;
        let wo = w + 2 * pw - kw + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            let obase = o * ho * wo;
            for c in 0..cin {
                for u in 0..kh {
                    for v in 0..kw {
                        let kv = kernel.data[((o * cin + c) * kh + u) * kw + v];
                        if kv == 0.0 {
                            continue;
                        }
                        // out[o,i,j] += kv * in[c, i+u-ph, j+v-pw] where in-bounds
                        for i in 0..ho {
                            let ii = i + u;
                            if ii < ph || ii - ph >= h {
                                continue;
                            }
                            let irow = (c * h + (ii - ph)) * w;
                            let orow = obase + i * wo;
                            let j_lo = pw.saturating_sub(v);
                            let j_hi = (w + pw - v).min(wo);
                            for j in j_lo..j_hi {
                                out[orow + j] += kv * self.data[irow + j + v - pw];
                            }
                        }
                    }
                }
            }
        }
        check_finite(&out, "conv2d")?;
        Ok(Tensor::from_parts(vec![co, ho, wo], out))
    }

    /// Same-size convolution: pad = (kh/2, kw/2).
    pub fn conv2d_same(&self, kernel: &Tensor) -> Result<Tensor> {
        if kernel.rank() != 4 {
            return Err(FlowError::Dim(format!(
                "conv2d kernel wants rank-4, got {:?}",
                kernel.shape
            )));
        }
        self.conv2d(kernel, (kernel.shape[2] / 2, kernel.shape[3] / 2))
    }

    /// 1x1 channel mixing: out[c,:] = sum_k w[c,k] * x[k,:], w rank-2 (C,C).
    pub fn channel_linear(&self, w: &Tensor) -> Result<Tensor> {
        let (c, h, wd) = self.rank3("channel_linear")?;
        let (wr, wc) = w.rank2("channel_linear weight")?;
        if wr != c || wc != c {
            return Err(FlowError::Dim(format!(
                "channel_linear: weight {:?} vs C={c}",
                w.shape
            )));
        }
        let flat = self.reshape(&[c, h * wd])?;
        w.matmul(&flat)?.reshape(&[c, h, wd])
    }

    /// out[c,i,j] = gamma[c] * x[c,i,j] + beta[c]; gamma/beta rank-1 [C].
    pub fn channel_affine(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.rank3("channel_affine")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(FlowError::Dim(format!(
                "channel_affine: gamma {:?} beta {:?} vs C={c}",
                gamma.shape, beta.shape
            )));
        }
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        for ci in 0..c {
            let (g, b) = (gamma.data[ci], beta.data[ci]);
            let src = &self.data[ci * hw..(ci + 1) * hw];
            let dst = &mut data[ci * hw..(ci + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = g * s + b;
            }
        }
        check_finite(&data, "channel_affine")?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// out[c,i,j] = x[c,i,j] + bias[c]; bias rank-1 [C].
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.rank3("add_channel_bias")?;
        if bias.shape() != [c] {
            return Err(FlowError::Dim(format!(
                "add_channel_bias: bias {:?} vs C={c}",
                bias.shape
            )));
        }
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        for ci in 0..c {
            let b = bias.data[ci];
            let src = &self.data[ci * hw..(ci + 1) * hw];
            let dst = &mut data[ci * hw..(ci + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
        check_finite(&data, "add_channel_bias")?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Per-channel standardization over spatial positions:
    /// out = (x - mean_c) / sqrt(var_c + eps), population variance.
    pub fn channel_standardize(&self, eps: f64) -> Result<Tensor> {
        let (c, h, w) = self.rank3("channel_standardize")?;
        if eps <= 0.0 {
            return Err(FlowError::Contract(format!(
                "channel_standardize wants eps > 0, got {eps}"
            )));
        }
        let hw = h * w;
        let n = hw as f64;
        let mut data = vec![0.0; c * hw];
        for ci in 0..c {
            let src = &self.data[ci * hw..(ci + 1) * hw];
            let mut mean = 0.0;
            for &v in src {
                mean += v;
            }
            mean /= n;
            let mut var = 0.0;
            for &v in src {
                var += (v - mean) * (v - mean);
            }
            var /= n;
            let inv = 1.0 / (var + eps).sqrt();
            let dst = &mut data[ci * hw..(ci + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
        }
        check_finite(&data, "channel_standardize")?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Rank-1 [C] -> rank-2 (C,C) diagonal matrix.
    pub fn diag_from_vec(&self) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(FlowError::Dim(format!(
                "diag_from_vec wants rank-1, got {:?}",
                self.shape
            )));
        }
        let c = self.shape[0];
        let mut data = vec![0.0; c * c];
        for i in 0..c {
            data[i * c + i] = self.data[i];
        }
        Ok(Tensor::from_parts(vec![c, c], data))
    }

    /// Row `row` of a rank-2 (K,E) table, as rank-2 (1,E).
    pub fn embed_row(&self, row: usize) -> Result<Tensor> {
        let (k, e) = self.rank2("embed_row")?;
        if row >= k {
            return Err(FlowError::Dim(format!("embed_row: row {row} of {k}")));
        }
        let data = self.data[row * e..(row + 1) * e].to_vec();
        Ok(Tensor::from_parts(vec![1, e], data))
    }

    /// Rank-2 (1,C) vector broadcast to a spatially constant (C,h,w) map.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Result<Tensor> {
        let (one, c) = self.rank2("broadcast_spatial")?;
        if one != 1 {
            return Err(FlowError::Dim(format!(
                "broadcast_spatial wants shape (1,C), got {:?}",
                self.shape
            )));
        }
        if h == 0 || w == 0 {
            return Err(FlowError::Dim("broadcast_spatial: zero spatial dim".into()));
        }
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            let v = self.data[ci];
            for d in &mut data[ci * h * w..(ci + 1) * h * w] {
                *d = v;
            }
        }
        Ok(Tensor::from_parts(vec![c, h, w], data))
    }
}
