//! Conditional affine coupling: a masked partition where one half is an
//! elementwise affine function of the other, with label conditioning fed
//! through FiLM-modulated convolutional nets.
//!
//! A coupling applies two half-steps so every position is transformed once:
//!   u = x_A + (1-M) . (x_B*exp(s1(x_A,y)) + t1(x_A,y))
//!   y = (1-M) . u_B + M . (u_A*exp(s2(u_B,y)) + t2(u_B,y))
//! logdet = sum((1-M)*s1) + sum(M*s2). Scales are bounded through
//! s = s_max * tanh(raw / s_max), so |s| <= s_max.

use crate::error::{FlowError, Result};
use crate::layers::Mask;
use crate::tensor::{NodeId, ParamId, ParamStore, Rng, Tensor, TraceSession};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    /// One-hot FiLM conditioning, two residual blocks. Tuned for sampling.
    Generation,
    /// Learned label embedding, feature standardization, dropout, and a
    /// label-feature fusion head. Tuned for likelihood separation.
    Classification,
}

/// Dropout rate used by classification nets during training.
pub const CLS_DROPOUT: f64 = 0.1;
const STANDARDIZE_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
struct GenNet {
    conv_in: ParamId,
    b_in: ParamId,
    film1_wg: ParamId,
    film1_bg: ParamId,
    film1_wb: ParamId,
    film1_bb: ParamId,
    blk1_c1: ParamId,
    blk1_b1: ParamId,
    blk1_c2: ParamId,
    blk1_b2: ParamId,
    blk2_c1: ParamId,
    blk2_b1: ParamId,
    blk2_c2: ParamId,
    blk2_b2: ParamId,
    film2_wg: ParamId,
    film2_bg: ParamId,
    film2_wb: ParamId,
    film2_bb: ParamId,
    head_s: ParamId,
    head_s_b: ParamId,
    head_t: ParamId,
    head_t_b: ParamId,
}

#[derive(Clone, Debug)]
struct ClsNet {
    emb: ParamId,
    emb_w1: ParamId,
    emb_b1: ParamId,
    emb_w2: ParamId,
    emb_b2: ParamId,
    conv_in: ParamId,
    b_in: ParamId,
    film_wg: ParamId,
    film_bg: ParamId,
    film_wb: ParamId,
    film_bb: ParamId,
    blk_c1: ParamId,
    blk_b1: ParamId,
    blk_c2: ParamId,
    blk_b2: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
    head_s: ParamId,
    head_s_b: ParamId,
    head_t: ParamId,
    head_t_b: ParamId,
}

#[derive(Clone, Debug)]
enum NetVariant {
    Generation(GenNet),
    Classification(ClsNet),
}

/// Conditioning network emitting the (s, t) pair for one coupling half-step.
/// Scale and translation heads are zero-initialized, so a fresh coupling is
/// the identity map.
#[derive(Clone, Debug)]
pub struct CouplingNet {
    channels: usize,
    num_classes: usize,
    hidden: usize,
    s_max: f64,
    variant: NetVariant,
}

fn he_conv(rng: &mut Rng, co: usize, ci: usize, k: usize) -> Result<Tensor> {
    let limit = (6.0 / (ci * k * k) as f64).sqrt();
    rng.uniform_tensor(&[co, ci, k, k], -limit, limit)
}

fn he_linear(rng: &mut Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let limit = (6.0 / rows as f64).sqrt();
    rng.uniform_tensor(&[rows, cols], -limit, limit)
}

impl CouplingNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: NetKind,
        channels: usize,
        num_classes: usize,
        hidden: usize,
        emb_width: usize,
        emb_channels: usize,
        s_max: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if s_max <= 0.0 {
            return Err(FlowError::Contract(format!("s_max must be positive, got {s_max}")));
        }
        if num_classes == 0 || channels == 0 || hidden == 0 {
            return Err(FlowError::Contract(
                "coupling net wants nonzero classes/channels/hidden".into(),
            ));
        }
        let (c, h, k) = (channels, hidden, num_classes);
        let p = |n: &str| format!("{prefix}.{n}");
        let variant = match kind {
            NetKind::Generation => NetVariant::Generation(GenNet {
                conv_in: store.add(&p("conv_in.w"), he_conv(rng, h, c, 3)?)?,
                b_in: store.add(&p("conv_in.b"), Tensor::zeros(&[h])?)?,
                film1_wg: store.add(&p("film1.wg"), Tensor::zeros(&[k, h])?)?,
                film1_bg: store.add(&p("film1.bg"), Tensor::ones(&[1, h])?)?,
                film1_wb: store.add(&p("film1.wb"), Tensor::zeros(&[k, h])?)?,
                film1_bb: store.add(&p("film1.bb"), Tensor::zeros(&[1, h])?)?,
                blk1_c1: store.add(&p("blk1.c1.w"), he_conv(rng, h, h, 3)?)?,
                blk1_b1: store.add(&p("blk1.c1.b"), Tensor::zeros(&[h])?)?,
                blk1_c2: store.add(&p("blk1.c2.w"), he_conv(rng, h, h, 3)?)?,
                blk1_b2: store.add(&p("blk1.c2.b"), Tensor::zeros(&[h])?)?,
                blk2_c1: store.add(&p("blk2.c1.w"), he_conv(rng, h, h, 3)?)?,
                blk2_b1: store.add(&p("blk2.c1.b"), Tensor::zeros(&[h])?)?,
                blk2_c2: store.add(&p("blk2.c2.w"), he_conv(rng, h, h, 3)?)?,
                blk2_b2: store.add(&p("blk2.c2.b"), Tensor::zeros(&[h])?)?,
                film2_wg: store.add(&p("film2.wg"), Tensor::zeros(&[k, h])?)?,
                film2_bg: store.add(&p("film2.bg"), Tensor::ones(&[1, h])?)?,
                film2_wb: store.add(&p("film2.wb"), Tensor::zeros(&[k, h])?)?,
                film2_bb: store.add(&p("film2.bb"), Tensor::zeros(&[1, h])?)?,
                head_s: store.add(&p("head_s.w"), Tensor::zeros(&[c, h, 3, 3])?)?,
                head_s_b: store.add(&p("head_s.b"), Tensor::zeros(&[c])?)?,
                head_t: store.add(&p("head_t.w"), Tensor::zeros(&[c, h, 3, 3])?)?,
                head_t_b: store.add(&p("head_t.b"), Tensor::zeros(&[c])?)?,
            }),
            NetKind::Classification => {
                let e = emb_width;
                let hc = h + emb_channels;
                let emb_scale = 1.0 / (e as f64).sqrt();
                NetVariant::Classification(ClsNet {
                    emb: store.add(
                        &p("emb.table"),
                        rng.normal_tensor(&[k, e])?.mul_scalar(emb_scale)?,
                    )?,
                    emb_w1: store.add(&p("emb.res.w1"), he_linear(rng, e, e)?)?,
                    emb_b1: store.add(&p("emb.res.b1"), Tensor::zeros(&[1, e])?)?,
                    emb_w2: store.add(&p("emb.res.w2"), he_linear(rng, e, e)?)?,
                    emb_b2: store.add(&p("emb.res.b2"), Tensor::zeros(&[1, e])?)?,
                    conv_in: store.add(&p("conv_in.w"), he_conv(rng, h, c, 3)?)?,
                    b_in: store.add(&p("conv_in.b"), Tensor::zeros(&[h])?)?,
                    film_wg: store.add(&p("film.wg"), Tensor::zeros(&[e, h])?)?,
                    film_bg: store.add(&p("film.bg"), Tensor::ones(&[1, h])?)?,
                    film_wb: store.add(&p("film.wb"), Tensor::zeros(&[e, h])?)?,
                    film_bb: store.add(&p("film.bb"), Tensor::zeros(&[1, h])?)?,
                    blk_c1: store.add(&p("blk.c1.w"), he_conv(rng, h, h, 3)?)?,
                    blk_b1: store.add(&p("blk.c1.b"), Tensor::zeros(&[h])?)?,
                    blk_c2: store.add(&p("blk.c2.w"), he_conv(rng, h, h, 3)?)?,
                    blk_b2: store.add(&p("blk.c2.b"), Tensor::zeros(&[h])?)?,
                    fuse_w: store.add(&p("fuse.w"), he_linear(rng, e, emb_channels)?)?,
                    fuse_b: store.add(&p("fuse.b"), Tensor::zeros(&[1, emb_channels])?)?,
                    head_s: store.add(&p("head_s.w"), Tensor::zeros(&[c, hc, 3, 3])?)?,
                    head_s_b: store.add(&p("head_s.b"), Tensor::zeros(&[c])?)?,
                    head_t: store.add(&p("head_t.w"), Tensor::zeros(&[c, hc, 3, 3])?)?,
                    head_t_b: store.add(&p("head_t.b"), Tensor::zeros(&[c])?)?,
                })
            }
        };
        Ok(CouplingNet { channels, num_classes, hidden, s_max, variant })
    }

    pub fn kind(&self) -> NetKind {
        match self.variant {
            NetVariant::Generation(_) => NetKind::Generation,
            NetVariant::Classification(_) => NetKind::Classification,
        }
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    fn check_inputs(&self, shape: &[usize], label: usize) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(FlowError::Dim(format!(
                "coupling net: input {shape:?} vs {} channels",
                self.channels
            )));
        }
        if label >= self.num_classes {
            return Err(FlowError::Contract(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Traced evaluation. `x_masked` must already have the non-conditioning
    /// positions zeroed. Returns (s, t); |s| <= s_max elementwise.
    pub fn eval(
        &self,
        sess: &mut TraceSession,
        x_masked: NodeId,
        label: usize,
        rng: Option<&mut Rng>,
    ) -> Result<(NodeId, NodeId)> {
        let shape = sess.tape.value(x_masked).shape().to_vec();
        self.check_inputs(&shape, label)?;
        let (h_dim, w_dim) = (shape[1], shape[2]);
        match &self.variant {
            NetVariant::Generation(net) => self.eval_gen(sess, net, x_masked, label),
            NetVariant::Classification(net) => {
                self.eval_cls(sess, net, x_masked, label, h_dim, w_dim, rng)
            }
        }
    }

    /// FiLM coefficients for one site: row `label` of the table plus bias,
    /// flattened to rank-1 [h].
    fn film_vec(
        sess: &mut TraceSession,
        table: ParamId,
        bias: ParamId,
        label: usize,
        width: usize,
    ) -> Result<NodeId> {
        let tb = sess.param(table);
        let b = sess.param(bias);
        let row = sess.tape.embed_row(tb, label)?;
        let v = sess.tape.add(row, b)?;
        sess.tape.reshape(v, &[width])
    }

    fn bounded_scale(&self, sess: &mut TraceSession, raw: NodeId) -> Result<NodeId> {
        let t = &mut sess.tape;
        let inner = t.mul_scalar(raw, 1.0 / self.s_max)?;
        let th = t.tanh(inner)?;
        t.mul_scalar(th, self.s_max)
    }

    fn eval_gen(
        &self,
        sess: &mut TraceSession,
        net: &GenNet,
        x: NodeId,
        label: usize,
    ) -> Result<(NodeId, NodeId)> {
        let h = self.hidden;
        let (kin, bin) = (sess.param(net.conv_in), sess.param(net.b_in));
        let h0 = sess.tape.conv2d_same(x, kin)?;
        let h0 = sess.tape.add_channel_bias(h0, bin)?;
        let h0 = sess.tape.relu(h0)?;

        let g1 = Self::film_vec(sess, net.film1_wg, net.film1_bg, label, h)?;
        let b1 = Self::film_vec(sess, net.film1_wb, net.film1_bb, label, h)?;
        let h1 = sess.tape.channel_affine(h0, g1, b1)?;

        let h2 = self.res_block(sess, h1, net.blk1_c1, net.blk1_b1, net.blk1_c2, net.blk1_b2)?;
        let h3 = self.res_block(sess, h2, net.blk2_c1, net.blk2_b1, net.blk2_c2, net.blk2_b2)?;

        let g2 = Self::film_vec(sess, net.film2_wg, net.film2_bg, label, h)?;
        let b2 = Self::film_vec(sess, net.film2_wb, net.film2_bb, label, h)?;
        let h4 = sess.tape.channel_affine(h3, g2, b2)?;
        let h4 = sess.tape.relu(h4)?;

        let (ks, bs) = (sess.param(net.head_s), sess.param(net.head_s_b));
        let sr = sess.tape.conv2d_same(h4, ks)?;
        let sr = sess.tape.add_channel_bias(sr, bs)?;
        let s = self.bounded_scale(sess, sr)?;
        let (kt, bt) = (sess.param(net.head_t), sess.param(net.head_t_b));
        let t = sess.tape.conv2d_same(h4, kt)?;
        let t = sess.tape.add_channel_bias(t, bt)?;
        Ok((s, t))
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_cls(
        &self,
        sess: &mut TraceSession,
        net: &ClsNet,
        x: NodeId,
        label: usize,
        h_dim: usize,
        w_dim: usize,
        rng: Option<&mut Rng>,
    ) -> Result<(NodeId, NodeId)> {
        let h = self.hidden;
        // Residual label embedding: e = e0 + (relu(e0 W1 + b1) W2 + b2).
        let table = sess.param(net.emb);
        let e0 = sess.tape.embed_row(table, label)?;
        let (w1, b1) = (sess.param(net.emb_w1), sess.param(net.emb_b1));
        let (w2, b2) = (sess.param(net.emb_w2), sess.param(net.emb_b2));
        let r = sess.tape.matmul(e0, w1)?;
        let r = sess.tape.add(r, b1)?;
        let r = sess.tape.relu(r)?;
        let r = sess.tape.matmul(r, w2)?;
        let r = sess.tape.add(r, b2)?;
        let e = sess.tape.add(e0, r)?;

        let (kin, bin) = (sess.param(net.conv_in), sess.param(net.b_in));
        let h0 = sess.tape.conv2d_same(x, kin)?;
        let h0 = sess.tape.add_channel_bias(h0, bin)?;
        let h0 = sess.tape.relu(h0)?;

        // FiLM from the embedding vector.
        let (wg, bg) = (sess.param(net.film_wg), sess.param(net.film_bg));
        let g = sess.tape.matmul(e, wg)?;
        let g = sess.tape.add(g, bg)?;
        let g = sess.tape.reshape(g, &[h])?;
        let (wb, bb) = (sess.param(net.film_wb), sess.param(net.film_bb));
        let be = sess.tape.matmul(e, wb)?;
        let be = sess.tape.add(be, bb)?;
        let be = sess.tape.reshape(be, &[h])?;
        let h1 = sess.tape.channel_affine(h0, g, be)?;

        let h2 = self.res_block(sess, h1, net.blk_c1, net.blk_b1, net.blk_c2, net.blk_b2)?;
        let h3 = sess.tape.channel_standardize(h2, STANDARDIZE_EPS)?;

        let h4 = if sess.training && CLS_DROPOUT > 0.0 {
            let rng = rng.ok_or_else(|| {
                FlowError::Contract("training-mode coupling eval needs an rng for dropout".into())
            })?;
            let keep = 1.0 - CLS_DROPOUT;
            let mask = Tensor::from_fn(sess.tape.value(h3).shape(), |_| {
                if rng.uniform() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })?;
            let m = sess.constant(mask);
            sess.tape.mul(h3, m)?
        } else {
            h3
        };

        // Fuse label features as extra channels.
        let (fw, fb) = (sess.param(net.fuse_w), sess.param(net.fuse_b));
        let f = sess.tape.matmul(e, fw)?;
        let f = sess.tape.add(f, fb)?;
        let fmap = sess.tape.broadcast_spatial(f, h_dim, w_dim)?;
        let hc = sess.tape.concat_channels(h4, fmap)?;

        let (ks, bs) = (sess.param(net.head_s), sess.param(net.head_s_b));
        let sr = sess.tape.conv2d_same(hc, ks)?;
        let sr = sess.tape.add_channel_bias(sr, bs)?;
        let s = self.bounded_scale(sess, sr)?;
        let (kt, bt) = (sess.param(net.head_t), sess.param(net.head_t_b));
        let t = sess.tape.conv2d_same(hc, kt)?;
        let t = sess.tape.add_channel_bias(t, bt)?;
        Ok((s, t))
    }

    fn res_block(
        &self,
        sess: &mut TraceSession,
        x: NodeId,
        c1: ParamId,
        b1: ParamId,
        c2: ParamId,
        b2: ParamId,
    ) -> Result<NodeId> {
        let (k1, k2) = (sess.param(c1), sess.param(c2));
        let (bb1, bb2) = (sess.param(b1), sess.param(b2));
        let r = sess.tape.conv2d_same(x, k1)?;
        let r = sess.tape.add_channel_bias(r, bb1)?;
        let r = sess.tape.relu(r)?;
        let r = sess.tape.conv2d_same(r, k2)?;
        let r = sess.tape.add_channel_bias(r, bb2)?;
        sess.tape.add(x, r)
    }

    /// Plain-tensor evaluation (eval mode, no dropout); used by the inverse
    /// pass. Runs the exact traced code on a scratch tape so the arithmetic
    /// is identical to training.
    pub fn eval_values(
        &self,
        store: &ParamStore,
        x_masked: &Tensor,
        label: usize,
    ) -> Result<(Tensor, Tensor)> {
        let mut sess = TraceSession::new(store, false);
        let x = sess.constant(x_masked.clone());
        let (s, t) = self.eval(&mut sess, x, label, None)?;
        Ok((sess.tape.value(s).clone(), sess.tape.value(t).clone()))
    }
}

/// Result of a traced coupling forward pass.
pub struct CouplingForward {
    pub y: NodeId,
    pub logdet: NodeId,
    pub s1: NodeId,
    pub s2: NodeId,
}

/// One full coupling layer: mask plus the two half-step nets.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub mask: Mask,
    net1: CouplingNet,
    net2: CouplingNet,
}

impl Coupling {
    pub fn new(mask: Mask, net1: CouplingNet, net2: CouplingNet) -> Result<Self> {
        if net1.channels != net2.channels || net1.num_classes != net2.num_classes {
            return Err(FlowError::Contract(
                "coupling halves disagree on channels or classes".into(),
            ));
        }
        if mask.values().shape()[0] != net1.channels {
            return Err(FlowError::Dim(format!(
                "mask shape {:?} vs {} net channels",
                mask.values().shape(),
                net1.channels
            )));
        }
        Ok(Coupling { mask, net1, net2 })
    }

    pub fn nets(&self) -> (&CouplingNet, &CouplingNet) {
        (&self.net1, &self.net2)
    }

    /// Traced forward pass.
    pub fn forward(
        &self,
        sess: &mut TraceSession,
        x: NodeId,
        label: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<CouplingForward> {
        if sess.tape.value(x).shape() != self.mask.values().shape() {
            return Err(FlowError::Dim(format!(
                "coupling: input {:?} vs mask {:?}",
                sess.tape.value(x).shape(),
                self.mask.values().shape()
            )));
        }
        let m = sess.constant(self.mask.values().clone());
        let mc = sess.constant(self.mask.complement()?);

        let xa = sess.tape.mul(x, m)?;
        let xb = sess.tape.mul(x, mc)?;

        let (s1, t1) = self.net1.eval(sess, xa, label, rng.as_deref_mut())?;
        let es1 = sess.tape.exp(s1)?;
        let ub = sess.tape.mul(xb, es1)?;
        let ub = sess.tape.add(ub, t1)?;
        let ub = sess.tape.mul(ub, mc)?;

        let (s2, t2) = self.net2.eval(sess, ub, label, rng)?;
        let es2 = sess.tape.exp(s2)?;
        let ya = sess.tape.mul(xa, es2)?;
        let ya = sess.tape.add(ya, t2)?;
        let ya = sess.tape.mul(ya, m)?;

        let y = sess.tape.add(ya, ub)?;

        let ld1 = sess.tape.mul(s1, mc)?;
        let ld1 = sess.tape.sum(ld1)?;
        let ld2 = sess.tape.mul(s2, m)?;
        let ld2 = sess.tape.sum(ld2)?;
        let logdet = sess.tape.add(ld1, ld2)?;

        Ok(CouplingForward { y, logdet, s1, s2 })
    }

    /// Exact inverse; evaluates the nets in eval mode on the already-known
    /// conditioning partitions.
    pub fn inverse(&self, store: &ParamStore, y: &Tensor, label: usize) -> Result<Tensor> {
        let m = self.mask.values();
        let mc = self.mask.complement()?;

        let ub = y.mul(&mc)?;
        let (s2, t2) = self.net2.eval_values(store, &ub, label)?;
        let ua = y.sub(&t2)?.mul(&s2.neg()?.exp()?)?.mul(m)?;
        let (s1, t1) = self.net1.eval_values(store, &ua, label)?;
        let xb = ub.sub(&t1)?.mul(&s1.neg()?.exp()?)?.mul(&mc)?;
        ua.add(&xb)
    }

    /// Per-element logdet contributions (1-M)*s1 + M*s2 from a forward pass;
    /// sums to the layer logdet up to float associativity.
    pub fn per_element_map(&self, sess: &TraceSession, fwd: &CouplingForward) -> Result<Tensor> {
        let s1 = sess.tape.value(fwd.s1);
        let s2 = sess.tape.value(fwd.s2);
        let mc = self.mask.complement()?;
        s1.mul(&mc)?.add(&s2.mul(self.mask.values())?)
    }
}
