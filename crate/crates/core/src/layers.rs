//! Invertible building blocks: activation normalization, invertible 1x1
//! channel mixing, and the binary masks couplings partition on.
//!
//! Forward passes run on the autodiff tape and return (output, logdet) so
//! likelihoods differentiate end to end; inverses are plain tensor math.

use crate::error::{FlowError, Result};
use crate::tensor::{NodeId, ParamId, ParamStore, Rng, Tensor, TraceSession};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Checkerboard,
    Channelwise,
    Application,
}

/// Binary coupling mask; 1 marks the conditioning partition (x_A).
#[derive(Clone, Debug)]
pub struct Mask {
    pub kind: MaskKind,
    pub parity: u8,
    values: Tensor,
}

impl Mask {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// 1 - M as a tensor.
    pub fn complement(&self) -> Result<Tensor> {
        self.values.neg()?.add_scalar(1.0)
    }
}

/// Build a mask for a (C,H,W) input.
///
/// Checkerboard: 1 where (i + j + parity) is even.
/// Channelwise: first C/2 channels get (1 - parity).
/// Application: centered ellipse with semi-axes 0.8*(H/2), 0.8*(W/2);
/// parity 1 selects the complement.
pub fn make_mask(kind: MaskKind, parity: u8, shape: (usize, usize, usize)) -> Result<Mask> {
    if parity > 1 {
        return Err(FlowError::Contract(format!("mask parity must be 0/1, got {parity}")));
    }
    let (c, h, w) = shape;
    let inside = |v: bool| if v { 1.0 } else { 0.0 };
    let values = match kind {
        MaskKind::Checkerboard => Tensor::from_fn(&[c, h, w], |idx| {
            let i = (idx / w) % h;
            let j = idx % w;
            inside((i + j + parity as usize) % 2 == 0)
        })?,
        MaskKind::Channelwise => {
            if c % 2 != 0 {
                return Err(FlowError::Dim(format!(
                    "channelwise mask wants even channel count, got {c}"
                )));
            }
            Tensor::from_fn(&[c, h, w], |idx| {
                let ch = idx / (h * w);
                inside((ch < c / 2) == (parity == 0))
            })?
        }
        MaskKind::Application => {
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            let ay = 0.8 * h as f64 / 2.0;
            let ax = 0.8 * w as f64 / 2.0;
            Tensor::from_fn(&[c, h, w], |idx| {
                let i = ((idx / w) % h) as f64;
                let j = (idx % w) as f64;
                let r = ((i - cy) / ay).powi(2) + ((j - cx) / ax).powi(2);
                inside((r <= 1.0) == (parity == 0))
            })?
        }
    };
    Ok(Mask { kind, parity, values })
}

/// Per-channel affine y = exp(log_scale[c]) * x + bias[c] with a
/// data-dependent initialization pass.
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub log_scale: ParamId,
    pub bias: ParamId,
    pub initialized: bool,
    channels: usize,
}

impl ActNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let log_scale = store.add(&format!("{prefix}.log_scale"), Tensor::zeros(&[channels])?)?;
        let bias = store.add(&format!("{prefix}.bias"), Tensor::zeros(&[channels])?)?;
        Ok(ActNorm { log_scale, bias, initialized: false, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Set scale/bias so the given batch comes out with per-channel mean 0 and
    /// standard deviation 1 (population convention). Errors on a constant
    /// channel rather than dividing by zero.
    pub fn init_from_batch(&mut self, store: &mut ParamStore, batch: &[Tensor]) -> Result<()> {
        if batch.is_empty() {
            return Err(FlowError::Contract("actnorm init wants a non-empty batch".into()));
        }
        let c = self.channels;
        for t in batch {
            if t.rank() != 3 || t.shape()[0] != c {
                return Err(FlowError::Dim(format!(
                    "actnorm init: batch item shape {:?} vs {c} channels",
                    t.shape()
                )));
            }
        }
        let hw = batch[0].shape()[1] * batch[0].shape()[2];
        let n = (batch.len() * hw) as f64;
        let mut log_scale = vec![0.0; c];
        let mut bias = vec![0.0; c];
        for ch in 0..c {
            let mut mean = 0.0;
            for t in batch {
                for &v in &t.data()[ch * hw..(ch + 1) * hw] {
                    mean += v;
                }
            }
            mean /= n;
            let mut var = 0.0;
            for t in batch {
                for &v in &t.data()[ch * hw..(ch + 1) * hw] {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= n;
            if var == 0.0 {
                return Err(FlowError::Degenerate(format!(
                    "actnorm init: channel {ch} has zero variance"
                )));
            }
            let std = var.sqrt();
            log_scale[ch] = -std.ln();
            bias[ch] = -mean / std;
        }
        store.set(self.log_scale, Tensor::new(vec![c], log_scale)?)?;
        store.set(self.bias, Tensor::new(vec![c], bias)?)?;
        self.initialized = true;
        Ok(())
    }

    /// Traced forward; returns (y, logdet) with logdet = H*W*sum(log_scale).
    pub fn forward(&self, sess: &mut TraceSession, x: NodeId) -> Result<(NodeId, NodeId)> {
        let shape = sess.tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(FlowError::Dim(format!(
                "actnorm: input {shape:?} vs {} channels",
                self.channels
            )));
        }
        let hw = (shape[1] * shape[2]) as f64;
        let ls = sess.param(self.log_scale);
        let b = sess.param(self.bias);
        let scale = sess.tape.exp(ls)?;
        let y = sess.tape.channel_affine(x, scale, b)?;
        let ld_sum = sess.tape.sum(ls)?;
        let logdet = sess.tape.mul_scalar(ld_sum, hw)?;
        Ok((y, logdet))
    }

    /// x = (y - bias) * exp(-log_scale), as one channel affine.
    pub fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        let inv_scale = store.get(self.log_scale).neg()?.exp()?;
        let shift = store.get(self.bias).neg()?.mul(&inv_scale)?;
        y.channel_affine(&inv_scale, &shift)
    }

    pub fn log_det(&self, store: &ParamStore, h: usize, w: usize) -> f64 {
        store.get(self.log_scale).sum() * (h * w) as f64
    }

    /// Element (c,i,j) carries log_scale[c]; sums to the layer logdet.
    pub fn per_element_map(&self, store: &ParamStore, h: usize, w: usize) -> Result<Tensor> {
        let ls = store.get(self.log_scale);
        let c = self.channels;
        let data = ls.data();
        Tensor::from_fn(&[c, h, w], |idx| data[idx / (h * w)])
    }
}

/// Invertible 1x1 convolution parameterized as W = P * L * U: P a frozen
/// seeded permutation, L unit lower triangular, U upper triangular with
/// exp(log_diag) on the diagonal. logdet is H*W*sum(log_diag) by construction
/// and the inverse needs only triangular solves.
#[derive(Clone, Debug)]
pub struct InvConv {
    pub lower: ParamId,
    pub upper: ParamId,
    pub log_diag: ParamId,
    perm: Vec<usize>,
    channels: usize,
}

impl InvConv {
    /// Fresh layer: W is exactly the seeded permutation matrix.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        let c = channels;
        let lower = store.add(&format!("{prefix}.lower"), Tensor::zeros(&[c, c])?)?;
        let upper = store.add(&format!("{prefix}.upper"), Tensor::zeros(&[c, c])?)?;
        let log_diag = store.add(&format!("{prefix}.log_diag"), Tensor::zeros(&[c])?)?;
        let perm = rng.permutation(c);
        Ok(InvConv { lower, upper, log_diag, perm, channels })
    }

    /// Rebuild with a known permutation (checkpoint restore).
    pub fn with_perm(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        perm: Vec<usize>,
    ) -> Result<Self> {
        if perm.len() != channels {
            return Err(FlowError::Dim(format!(
                "invconv perm length {} vs {channels} channels",
                perm.len()
            )));
        }
        let mut seen = vec![false; channels];
        for &p in &perm {
            if p >= channels || seen[p] {
                return Err(FlowError::Contract(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let c = channels;
        let lower = store.add(&format!("{prefix}.lower"), Tensor::zeros(&[c, c])?)?;
        let upper = store.add(&format!("{prefix}.upper"), Tensor::zeros(&[c, c])?)?;
        let log_diag = store.add(&format!("{prefix}.log_diag"), Tensor::zeros(&[c])?)?;
        Ok(InvConv { lower, upper, log_diag, perm, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    fn perm_matrix(&self) -> Result<Tensor> {
        let c = self.channels;
        let mut data = vec![0.0; c * c];
        for (i, &p) in self.perm.iter().enumerate() {
            data[i * c + p] = 1.0;
        }
        Tensor::new(vec![c, c], data)
    }

    fn strict_lower_mask(c: usize) -> Result<Tensor> {
        Tensor::from_fn(&[c, c], |idx| if idx / c > idx % c { 1.0 } else { 0.0 })
    }

    fn strict_upper_mask(c: usize) -> Result<Tensor> {
        Tensor::from_fn(&[c, c], |idx| if idx / c < idx % c { 1.0 } else { 0.0 })
    }

    fn eye(c: usize) -> Result<Tensor> {
        Tensor::from_fn(&[c, c], |idx| if idx / c == idx % c { 1.0 } else { 0.0 })
    }

    /// Assemble W = P L U on the tape.
    fn weight_node(&self, sess: &mut TraceSession) -> Result<NodeId> {
        let c = self.channels;
        let lo = sess.param(self.lower);
        let up = sess.param(self.upper);
        let ld = sess.param(self.log_diag);
        let ml = sess.constant(Self::strict_lower_mask(c)?);
        let mu = sess.constant(Self::strict_upper_mask(c)?);
        let eye = sess.constant(Self::eye(c)?);
        let p = sess.constant(self.perm_matrix()?);
        let t = &mut sess.tape;
        let l_strict = t.mul(lo, ml)?;
        let l = t.add(l_strict, eye)?;
        let u_strict = t.mul(up, mu)?;
        let d = t.exp(ld)?;
        let d = t.diag_from_vec(d)?;
        let u = t.add(u_strict, d)?;
        let lu = t.matmul(l, u)?;
        t.matmul(p, lu)
    }

    /// Plain-tensor W for inspection and tests.
    pub fn weight(&self, store: &ParamStore) -> Result<Tensor> {
        let c = self.channels;
        let l = store
            .get(self.lower)
            .mul(&Self::strict_lower_mask(c)?)?
            .add(&Self::eye(c)?)?;
        let u = store
            .get(self.upper)
            .mul(&Self::strict_upper_mask(c)?)?
            .add(&store.get(self.log_diag).exp()?.diag_from_vec()?)?;
        self.perm_matrix()?.matmul(&l.matmul(&u)?)
    }

    /// Traced forward; returns (y, logdet) with logdet = H*W*sum(log_diag).
    pub fn forward(&self, sess: &mut TraceSession, x: NodeId) -> Result<(NodeId, NodeId)> {
        let shape = sess.tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(FlowError::Dim(format!(
                "invconv: input {shape:?} vs {} channels",
                self.channels
            )));
        }
        let hw = (shape[1] * shape[2]) as f64;
        let w = self.weight_node(sess)?;
        let y = sess.tape.channel_linear(x, w)?;
        let ld = sess.param(self.log_diag);
        let s = sess.tape.sum(ld)?;
        let logdet = sess.tape.mul_scalar(s, hw)?;
        Ok((y, logdet))
    }

    /// Solve W x = y per spatial site via P^T then two triangular solves;
    /// never forms a matrix inverse.
    pub fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        let c = self.channels;
        if y.rank() != 3 || y.shape()[0] != c {
            return Err(FlowError::Dim(format!(
                "invconv inverse: input {:?} vs {c} channels",
                y.shape()
            )));
        }
        let (h, w) = (y.shape()[1], y.shape()[2]);
        let hw = h * w;
        let l = store.get(self.lower).mul(&Self::strict_lower_mask(c)?)?;
        let u = store.get(self.upper).mul(&Self::strict_upper_mask(c)?)?;
        let diag = store.get(self.log_diag).exp()?;
        let ld = l.data();
        let ud = u.data();
        let dd = diag.data();
        let mut inv_perm = vec![0usize; c];
        for (i, &p) in self.perm.iter().enumerate() {
            inv_perm[p] = i;
        }
        let ydata = y.data();
        let mut out = vec![0.0; c * hw];
        let mut b = vec![0.0; c];
        let mut v = vec![0.0; c];
        for s in 0..hw {
            // b = P^T y  =>  b[i] = y[inv_perm[i]]
            for i in 0..c {
                b[i] = ydata[inv_perm[i] * hw + s];
            }
            // forward solve (I + L) v = b
            for i in 0..c {
                let mut acc = b[i];
                for j in 0..i {
                    acc -= ld[i * c + j] * v[j];
                }
                v[i] = acc;
            }
            // back solve (U + D) x = v
            for i in (0..c).rev() {
                let mut acc = v[i];
                for j in i + 1..c {
                    acc -= ud[i * c + j] * out[j * hw + s];
                }
                out[i * hw + s] = acc / dd[i];
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    pub fn log_det(&self, store: &ParamStore, h: usize, w: usize) -> f64 {
        store.get(self.log_diag).sum() * (h * w) as f64
    }

    /// Uniform per-element share: sum(log_diag)/C at every site; sums to the
    /// layer logdet.
    pub fn per_element_map(&self, store: &ParamStore, h: usize, w: usize) -> Result<Tensor> {
        let share = store.get(self.log_diag).sum() / self.channels as f64;
        Tensor::full(&[self.channels, h, w], share)
    }
}

/// Split a (C,H,W) tensor into (keep, out) halves along channels; keep is the
/// first C/2. Inverse of [`merge_channels`].
pub fn split_channels(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = x.shape()[0];
    if x.rank() != 3 || c % 2 != 0 {
        return Err(FlowError::Dim(format!(
            "split wants rank-3 with even channels, got {:?}",
            x.shape()
        )));
    }
    Ok((x.chan_slice(0, c / 2)?, x.chan_slice(c / 2, c)?))
}

pub fn merge_channels(keep: &Tensor, out: &Tensor) -> Result<Tensor> {
    keep.concat_channels(out)
}
