//! Reverse-mode autodiff over a linear tape of tensor ops.
//!
//! Forward calls append nodes; `backward` replays them in strict reverse
//! creation order, accumulating vector-Jacobian products additively at
//! fan-out. Gradients only flow into nodes flagged `needs_grad` (parameter
//! leaves and anything downstream of one), so constants cost nothing extra.

use super::{check_finite, Tensor};
use crate::error::{FlowError, Result};
use std::collections::BTreeMap;

/// Index of a registered parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u32);

/// Named, ordered parameter set. Insertion order is the canonical order used
/// by optimizers and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(FlowError::Contract(format!("duplicate parameter {name}")));
        }
        self.entries.push((name.to_string(), value));
        Ok(ParamId((self.entries.len() - 1) as u32))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0 as usize].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0 as usize].0
    }

    /// Replace a parameter value; the shape is fixed at registration.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0 as usize];
        if slot.1.shape() != value.shape() {
            return Err(FlowError::Dim(format!(
                "parameter {} shape {:?} cannot become {:?}",
                slot.0,
                slot.1.shape(),
                value.shape()
            )));
        }
        slot.1 = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i as u32), n.as_str(), t))
    }
}

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(u32);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Exp(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Conv2d { x: NodeId, k: NodeId, pad: (usize, usize) },
    MatMul(NodeId, NodeId),
    ChannelLinear { x: NodeId, w: NodeId },
    ChannelAffine { x: NodeId, gamma: NodeId, beta: NodeId },
    AddChannelBias { x: NodeId, bias: NodeId },
    DiagFromVec(NodeId),
    ChannelStandardize { x: NodeId, eps: f64 },
    Squeeze(NodeId),
    Unsqueeze(NodeId),
    ChanSlice { x: NodeId, from: usize },
    ConcatChannels(NodeId, NodeId),
    EmbedRow { table: NodeId, row: usize },
    BroadcastSpatial(NodeId),
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Gradients keyed by parameter id. Parameters never touched by the loss are
/// absent; [`Gradients::dense`] materializes zeros for them.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<u32, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id.0)
    }

    /// One gradient per store parameter, zero-filled where absent.
    pub fn dense(&self, store: &ParamStore) -> Result<Vec<Tensor>> {
        store
            .iter()
            .map(|(id, _, t)| match self.map.get(&id.0) {
                Some(g) => Ok(g.clone()),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

/// Linear autodiff tape. One tape per differentiated scalar; build the
/// forward computation through the methods below, then call [`GradTape::backward`].
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0 as usize].value
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, needs_grad, op });
        id
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0 as usize].needs_grad
    }

    /// Differentiable leaf when `param` is set; constant otherwise.
    pub fn leaf(&mut self, value: Tensor, param: Option<ParamId>) -> NodeId {
        self.push(value, param.is_some(), Op::Leaf { param })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).add_scalar(c)?;
        Ok(self.push(v, self.ng(a), Op::AddScalar(a)))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).mul_scalar(c)?;
        Ok(self.push(v, self.ng(a), Op::MulScalar(a, c)))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).exp()?;
        Ok(self.push(v, self.ng(a), Op::Exp(a)))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).tanh()?;
        Ok(self.push(v, self.ng(a), Op::Tanh(a)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).relu()?;
        Ok(self.push(v, self.ng(a), Op::Relu(a)))
    }

    /// Sum of all elements as a shape-[1] tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum())?;
        Ok(self.push(v, self.ng(a), Op::Sum(a)))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, pad: (usize, usize)) -> Result<NodeId> {
        let v = self.value(x).conv2d(self.value(k), pad)?;
        Ok(self.push(v, self.ng(x) || self.ng(k), Op::Conv2d { x, k, pad }))
    }

    pub fn conv2d_same(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        let ks = self.value(k).shape();
        if ks.len() != 4 {
            return Err(FlowError::Dim(format!("conv2d kernel wants rank-4, got {ks:?}")));
        }
        let pad = (ks[2] / 2, ks[3] / 2);
        self.conv2d(x, k, pad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::MatMul(a, b)))
    }

    pub fn channel_linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let v = self.value(x).channel_linear(self.value(w))?;
        Ok(self.push(v, self.ng(x) || self.ng(w), Op::ChannelLinear { x, w }))
    }

    pub fn channel_affine(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let v = self.value(x).channel_affine(self.value(gamma), self.value(beta))?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(v, ng, Op::ChannelAffine { x, gamma, beta }))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_channel_bias(self.value(bias))?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(v, ng, Op::AddChannelBias { x, bias }))
    }

    pub fn diag_from_vec(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).diag_from_vec()?;
        Ok(self.push(v, self.ng(a), Op::DiagFromVec(a)))
    }

    pub fn channel_standardize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let v = self.value(x).channel_standardize(eps)?;
        Ok(self.push(v, self.ng(x), Op::ChannelStandardize { x, eps }))
    }

    pub fn squeeze2x(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).squeeze2x()?;
        Ok(self.push(v, self.ng(x), Op::Squeeze(x)))
    }

    pub fn unsqueeze2x(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).unsqueeze2x()?;
        Ok(self.push(v, self.ng(x), Op::Unsqueeze(x)))
    }

    pub fn chan_slice(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let v = self.value(x).chan_slice(from, to)?;
        Ok(self.push(v, self.ng(x), Op::ChanSlice { x, from }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).concat_channels(self.value(b))?;
        Ok(self.push(v, self.ng(a) || self.ng(b), Op::ConcatChannels(a, b)))
    }

    pub fn embed_row(&mut self, table: NodeId, row: usize) -> Result<NodeId> {
        let v = self.value(table).embed_row(row)?;
        Ok(self.push(v, self.ng(table), Op::EmbedRow { table, row }))
    }

    pub fn broadcast_spatial(&mut self, v: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let t = self.value(v).broadcast_spatial(h, w)?;
        Ok(self.push(t, self.ng(v), Op::BroadcastSpatial(v)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, self.ng(x), Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// parameter leaf the loss actually depends on; untouched parameters are
    /// reported as zero by [`Gradients::dense`].
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let ln = &self.nodes[loss.0 as usize];
        if ln.value.len() != 1 {
            return Err(FlowError::Contract(format!(
                "backward wants a scalar loss, got shape {:?}",
                ln.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0 as usize] = Some(vec![1.0]);

        let mut out = Gradients::default();
        for id in (0..=loss.0 as usize).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(id, &g, &mut grads, &mut out)?;
        }
        for t in out.map.values() {
            check_finite(t.data(), "parameter gradient")?;
        }
        Ok(out)
    }

    fn apply_vjp(
        &self,
        id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        // Borrow-friendly accumulator: materializes a zero buffer on first touch.
        fn acc<'a>(
            nodes: &[Node],
            grads: &'a mut [Option<Vec<f64>>],
            id: NodeId,
        ) -> Option<&'a mut Vec<f64>> {
            let i = id.0 as usize;
            if !nodes[i].needs_grad {
                return None;
            }
            let len = nodes[i].value.len();
            Some(grads[i].get_or_insert_with(|| vec![0.0; len]))
        }

        let nodes = &self.nodes;
        let val = |n: NodeId| nodes[n.0 as usize].value.data();

        match &nodes[id].op {
            Op::Leaf { param } => {
                if let Some(pid) = param {
                    let shape = nodes[id].value.shape().to_vec();
                    let entry = out.map.entry(pid.0);
                    use std::collections::btree_map::Entry;
                    match entry {
                        Entry::Vacant(v) => {
                            v.insert(Tensor::from_parts(shape, g.to_vec()));
                        }
                        Entry::Occupied(mut o) => {
                            let mut cur = o.get().data().to_vec();
                            for (c, &gv) in cur.iter_mut().zip(g) {
                                *c += gv;
                            }
                            *o.get_mut() = Tensor::from_parts(shape, cur);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for n in [*a, *b] {
                    if let Some(ga) = acc(nodes, grads, n) {
                        for (d, &gv) in ga.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for (d, &gv) in gb.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(ga) = acc(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                }
            }
            Op::Exp(a) => {
                let y = nodes[id].value.data().to_vec();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
            }
            Op::Tanh(a) => {
                let y = nodes[id].value.data().to_vec();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a).to_vec();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g[0];
                if let Some(ga) = acc(nodes, grads, *a) {
                    for d in ga.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Conv2d { x, k, pad } => {
                self.vjp_conv2d(*x, *k, *pad, g, grads, nodes)?;
            }
            Op::MatMul(a, b) => {
                let (m, ka) = {
                    let s = nodes[a.0 as usize].value.shape();
                    (s[0], s[1])
                };
                let n = nodes[b.0 as usize].value.shape()[1];
                let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(ga) = acc(nodes, grads, *a) {
                    // dA[i,k] += sum_j g[i,j] * B[k,j]
                    for i in 0..m {
                        for k in 0..ka {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb[k * n + j];
                            }
                            ga[i * ka + k] += s;
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    // dB[k,j] += sum_i A[i,k] * g[i,j]
                    for k in 0..ka {
                        for i in 0..m {
                            let a_ik = va[i * ka + k];
                            if a_ik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[k * n + j] += a_ik * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::ChannelLinear { x, w } => {
                let (c, hw) = {
                    let s = nodes[x.0 as usize].value.shape();
                    (s[0], s[1] * s[2])
                };
                let (vx, vw) = (val(*x).to_vec(), val(*w).to_vec());
                if let Some(gx) = acc(nodes, grads, *x) {
                    // dX[k,s] += sum_c w[c,k] * g[c,s]
                    for c0 in 0..c {
                        for k in 0..c {
                            let wck = vw[c0 * c + k];
                            if wck == 0.0 {
                                continue;
                            }
                            for s in 0..hw {
                                gx[k * hw + s] += wck * g[c0 * hw + s];
                            }
                        }
                    }
                }
                if let Some(gw) = acc(nodes, grads, *w) {
                    // dW[c,k] += sum_s g[c,s] * x[k,s]
                    for c0 in 0..c {
                        for k in 0..c {
                            let mut s_acc = 0.0;
                            for s in 0..hw {
                                s_acc += g[c0 * hw + s] * vx[k * hw + s];
                            }
                            gw[c0 * c + k] += s_acc;
                        }
                    }
                }
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (c, hw) = {
                    let s = nodes[x.0 as usize].value.shape();
                    (s[0], s[1] * s[2])
                };
                let (vx, vg) = (val(*x).to_vec(), val(*gamma).to_vec());
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ci in 0..c {
                        let gm = vg[ci];
                        for s in 0..hw {
                            gx[ci * hw + s] += gm * g[ci * hw + s];
                        }
                    }
                }
                if let Some(gg) = acc(nodes, grads, *gamma) {
                    for ci in 0..c {
                        let mut s_acc = 0.0;
                        for s in 0..hw {
                            s_acc += g[ci * hw + s] * vx[ci * hw + s];
                        }
                        gg[ci] += s_acc;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *beta) {
                    for ci in 0..c {
                        let mut s_acc = 0.0;
                        for s in 0..hw {
                            s_acc += g[ci * hw + s];
                        }
                        gb[ci] += s_acc;
                    }
                }
            }
            Op::AddChannelBias { x, bias } => {
                let (c, hw) = {
                    let s = nodes[x.0 as usize].value.shape();
                    (s[0], s[1] * s[2])
                };
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (d, &gv) in gx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *bias) {
                    for ci in 0..c {
                        let mut s_acc = 0.0;
                        for s in 0..hw {
                            s_acc += g[ci * hw + s];
                        }
                        gb[ci] += s_acc;
                    }
                }
            }
            Op::DiagFromVec(a) => {
                let c = nodes[a.0 as usize].value.len();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for i in 0..c {
                        ga[i] += g[i * c + i];
                    }
                }
            }
            Op::ChannelStandardize { x, eps } => {
                let (c, hw) = {
                    let s = nodes[x.0 as usize].value.shape();
                    (s[0], s[1] * s[2])
                };
                let y = nodes[id].value.data().to_vec();
                let vx = val(*x).to_vec();
                let n = hw as f64;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ci in 0..c {
                        let xs = &vx[ci * hw..(ci + 1) * hw];
                        let ys = &y[ci * hw..(ci + 1) * hw];
                        let gs = &g[ci * hw..(ci + 1) * hw];
                        let mut mean = 0.0;
                        for &v in xs {
                            mean += v;
                        }
                        mean /= n;
                        let mut var = 0.0;
                        for &v in xs {
                            var += (v - mean) * (v - mean);
                        }
                        var /= n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut g_mean = 0.0;
                        let mut gy_mean = 0.0;
                        for s in 0..hw {
                            g_mean += gs[s];
                            gy_mean += gs[s] * ys[s];
                        }
                        g_mean /= n;
                        gy_mean /= n;
                        for s in 0..hw {
                            gx[ci * hw + s] += inv * (gs[s] - g_mean - ys[s] * gy_mean);
                        }
                    }
                }
            }
            Op::Squeeze(x) => {
                let gt = Tensor::from_parts(nodes[id].value.shape().to_vec(), g.to_vec());
                let ups = gt.unsqueeze2x()?;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (d, &gv) in gx.iter_mut().zip(ups.data()) {
                        *d += gv;
                    }
                }
            }
            Op::Unsqueeze(x) => {
                let gt = Tensor::from_parts(nodes[id].value.shape().to_vec(), g.to_vec());
                let sq = gt.squeeze2x()?;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (d, &gv) in gx.iter_mut().zip(sq.data()) {
                        *d += gv;
                    }
                }
            }
            Op::ChanSlice { x, from, .. } => {
                let hw = {
                    let s = nodes[x.0 as usize].value.shape();
                    s[1] * s[2]
                };
                let offset = from * hw;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (i, &gv) in g.iter().enumerate() {
                        gx[offset + i] += gv;
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let la = nodes[a.0 as usize].value.len();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (d, &gv) in ga.iter_mut().zip(&g[..la]) {
                        *d += gv;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for (d, &gv) in gb.iter_mut().zip(&g[la..]) {
                        *d += gv;
                    }
                }
            }
            Op::EmbedRow { table, row } => {
                let e = nodes[id].value.len();
                if let Some(gt) = acc(nodes, grads, *table) {
                    for (i, &gv) in g.iter().enumerate() {
                        gt[row * e + i] += gv;
                    }
                }
            }
            Op::BroadcastSpatial(v) => {
                let (c, hw) = {
                    let s = nodes[id].value.shape();
                    (s[0], s[1] * s[2])
                };
                if let Some(gv) = acc(nodes, grads, *v) {
                    for ci in 0..c {
                        let mut s_acc = 0.0;
                        for s in 0..hw {
                            s_acc += g[ci * hw + s];
                        }
                        gv[ci] += s_acc;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (d, &gv) in gx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
        }
        Ok(())
    }

    fn vjp_conv2d(
        &self,
        x: NodeId,
        k: NodeId,
        pad: (usize, usize),
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        nodes: &[Node],
    ) -> Result<()> {
        let xs = nodes[x.0 as usize].value.shape().to_vec();
        let ks = nodes[k.0 as usize].value.shape().to_vec();
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        let (ph, pw) = pad;
        let ho = h + 2 * ph - kh + 1;
        let wo = w + 2 * pw - kw + 1;
        let vx = nodes[x.0 as usize].value.data().to_vec();
        let vk = nodes[k.0 as usize].value.data().to_vec();

        let need_x = nodes[x.0 as usize].needs_grad;
        let need_k = nodes[k.0 as usize].needs_grad;

        // forward: out[o,i,j] += k[o,c,u,v] * in[c, i+u-ph, j+v-pw]
        if need_x {
            let len = nodes[x.0 as usize].value.len();
            let gx = grads[x.0 as usize].get_or_insert_with(|| vec![0.0; len]);
            for o in 0..co {
                for c in 0..cin {
                    for u in 0..kh {
                        for v in 0..kw {
                            let kv = vk[((o * cin + c) * kh + u) * kw + v];
                            if kv == 0.0 {
                                continue;
                            }
                            for i in 0..ho {
                                let ii = i + u;
                                if ii < ph || ii - ph >= h {
                                    continue;
                                }
                                let xrow = (c * h + (ii - ph)) * w;
                                let grow = (o * ho + i) * wo;
                                let j_lo = pw.saturating_sub(v);
                                let j_hi = (w + pw - v).min(wo);
                                for j in j_lo..j_hi {
                                    gx[xrow + j + v - pw] += kv * g[grow + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_k {
            let len = nodes[k.0 as usize].value.len();
            let gk = grads[k.0 as usize].get_or_insert_with(|| vec![0.0; len]);
            for o in 0..co {
                for c in 0..cin {
                    for u in 0..kh {
                        for v in 0..kw {
                            let mut s_acc = 0.0;
                            for i in 0..ho {
                                let ii = i + u;
                                if ii < ph || ii - ph >= h {
                                    continue;
                                }
                                let xrow = (c * h + (ii - ph)) * w;
                                let grow = (o * ho + i) * wo;
                                let j_lo = pw.saturating_sub(v);
                                let j_hi = (w + pw - v).min(wo);
                                for j in j_lo..j_hi {
                                    s_acc += g[grow + j] * vx[xrow + j + v - pw];
                                }
                            }
                            gk[((o * cin + c) * kh + u) * kw + v] += s_acc;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// One forward trace against a parameter store: caches one leaf per parameter
/// so repeated uses share a node, and carries the train/eval flag that
/// controls dropout.
pub struct TraceSession<'a> {
    pub tape: GradTape,
    store: &'a ParamStore,
    leaves: Vec<Option<NodeId>>,
    pub training: bool,
}

impl<'a> TraceSession<'a> {
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        TraceSession {
            tape: GradTape::new(),
            store,
            leaves: vec![None; store.len()],
            training,
        }
    }

    /// Tape node for a parameter, registered on first use.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let slot = id.0 as usize;
        if let Some(n) = self.leaves[slot] {
            return n;
        }
        let n = self.tape.leaf(self.store.get(id).clone(), Some(id));
        self.leaves[slot] = Some(n);
        n
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.tape.constant(t)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}
