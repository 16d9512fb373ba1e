//! Multiscale conditional flow: a schedule of (ActNorm, 1x1 conv, coupling)
//! steps interleaved with squeezes and latent splits, mapping
//! x <-> (z_1..z_{S+1}) with an exactly tracked log-determinant.
//!
//! log p(x|y) = sum_j log N(z_j; 0, I) + logdet. Every split latent gets the
//! standard-normal prior.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{train, EpochStats, TrainOptions};

use crate::coupling::{Coupling, CouplingNet, NetKind};
use crate::error::{FlowError, Result};
use crate::layers::{make_mask, ActNorm, InvConv, MaskKind};
use crate::tensor::{Gradients, NodeId, ParamStore, Rng, Tensor, TraceSession};

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowTask {
    Generation,
    Classification,
}

impl FlowTask {
    fn net_kind(self) -> NetKind {
        match self {
            FlowTask::Generation => NetKind::Generation,
            FlowTask::Classification => NetKind::Classification,
        }
    }
}

/// One entry of the layer schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageDesc {
    /// Full flow step: ActNorm -> invertible 1x1 -> coupling with this mask.
    Step { mask: MaskKind, parity: u8 },
    /// Space-to-depth by 2.
    Squeeze,
    /// Send the second channel half to the prior; keep the first.
    Split,
}

/// Static model description; everything needed to rebuild the layer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub task: FlowTask,
    pub in_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub schedule: Vec<StageDesc>,
    pub hidden: usize,
    pub emb_width: usize,
    pub emb_channels: usize,
    pub s_max: f64,
    pub seed: u64,
}

/// Shapes derived from walking the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    /// Shape entering each stage, indexed like the schedule.
    pub stage_inputs: Vec<(usize, usize, usize)>,
    /// Split outputs in emission order, then the final latent.
    pub latent_shapes: Vec<(usize, usize, usize)>,
    pub total_dims: usize,
}

fn step_mask_desc(mask: MaskKind, parity: u8) -> StageDesc {
    StageDesc::Step { mask, parity }
}

impl FlowConfig {
    /// The default multiscale image schedule: an application-mask step plus
    /// three checkerboard steps at full resolution, then three rounds of
    /// (squeeze, 3 channelwise, split, 3 checkerboard-next-scale), closing
    /// with a five-step tail at the deepest scale. 24 coupling steps for
    /// three squeezes and three splits.
    pub fn multiscale(
        task: FlowTask,
        in_shape: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
    ) -> Result<FlowConfig> {
        use MaskKind::*;
        let mut schedule = vec![
            step_mask_desc(Application, 0),
            step_mask_desc(Checkerboard, 0),
            step_mask_desc(Checkerboard, 1),
            step_mask_desc(Checkerboard, 0),
        ];
        for _ in 0..3 {
            schedule.push(StageDesc::Squeeze);
            schedule.push(step_mask_desc(Channelwise, 0));
            schedule.push(step_mask_desc(Channelwise, 1));
            schedule.push(step_mask_desc(Channelwise, 0));
            schedule.push(StageDesc::Split);
            schedule.push(step_mask_desc(Checkerboard, 0));
            schedule.push(step_mask_desc(Checkerboard, 1));
            schedule.push(step_mask_desc(Checkerboard, 0));
        }
        // The last checkerboard trio above starts the tail; extend it.
        schedule.push(step_mask_desc(Channelwise, 0));
        schedule.push(step_mask_desc(Channelwise, 1));
        let cfg = FlowConfig {
            task,
            in_shape,
            num_classes,
            schedule,
            hidden: 8,
            emb_width: 16,
            emb_channels: 4,
            s_max: 2.0,
            seed,
        };
        cfg.layout()?;
        Ok(cfg)
    }

    /// Small-image schedule: one squeeze, one split, 8 coupling steps.
    pub fn reduced(
        task: FlowTask,
        in_shape: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
    ) -> Result<FlowConfig> {
        use MaskKind::*;
        let schedule = vec![
            step_mask_desc(Application, 0),
            step_mask_desc(Checkerboard, 0),
            step_mask_desc(Checkerboard, 1),
            step_mask_desc(Checkerboard, 0),
            StageDesc::Squeeze,
            step_mask_desc(Channelwise, 0),
            step_mask_desc(Channelwise, 1),
            step_mask_desc(Channelwise, 0),
            step_mask_desc(Channelwise, 1),
            StageDesc::Split,
        ];
        let cfg = FlowConfig {
            task,
            in_shape,
            num_classes,
            schedule,
            hidden: 8,
            emb_width: 16,
            emb_channels: 4,
            s_max: 2.0,
            seed,
        };
        cfg.layout()?;
        Ok(cfg)
    }

    /// Vector-data schedule: `n_steps` channelwise couplings with alternating
    /// parity on a (channels,1,1) input. No squeezes or splits.
    pub fn toy(
        task: FlowTask,
        channels: usize,
        num_classes: usize,
        n_steps: usize,
        seed: u64,
    ) -> Result<FlowConfig> {
        let schedule = (0..n_steps)
            .map(|i| step_mask_desc(MaskKind::Channelwise, (i % 2) as u8))
            .collect();
        let cfg = FlowConfig {
            task,
            in_shape: (channels, 1, 1),
            num_classes,
            schedule,
            hidden: 8,
            emb_width: 16,
            emb_channels: 4,
            s_max: 2.0,
            seed,
        };
        cfg.layout()?;
        Ok(cfg)
    }

    /// Walk the schedule, checking divisibility at every squeeze/split and
    /// channel parity for channelwise masks. Errors name the offending stage.
    pub fn layout(&self) -> Result<Layout> {
        let (c0, h0, w0) = self.in_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(FlowError::Config(format!("empty input shape {:?}", self.in_shape)));
        }
        if self.num_classes == 0 {
            return Err(FlowError::Config("num_classes must be at least 1".into()));
        }
        if self.s_max <= 0.0 {
            return Err(FlowError::Config(format!("s_max must be positive, got {}", self.s_max)));
        }
        if self.hidden == 0 || self.emb_width == 0 || self.emb_channels == 0 {
            return Err(FlowError::Config("hidden/emb widths must be nonzero".into()));
        }
        if self.schedule.is_empty() {
            return Err(FlowError::Config("schedule is empty".into()));
        }
        let (mut c, mut h, mut w) = (c0, h0, w0);
        let mut stage_inputs = Vec::with_capacity(self.schedule.len());
        let mut latent_shapes = Vec::new();
        for (i, stage) in self.schedule.iter().enumerate() {
            stage_inputs.push((c, h, w));
            match stage {
                StageDesc::Step { mask, parity } => {
                    if *parity > 1 {
                        return Err(FlowError::Config(format!(
                            "stage {i}: parity {parity} out of range"
                        )));
                    }
                    if *mask == MaskKind::Channelwise && c % 2 != 0 {
                        return Err(FlowError::Config(format!(
                            "stage {i}: channelwise mask needs even channels, have {c}"
                        )));
                    }
                }
                StageDesc::Squeeze => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(FlowError::Config(format!(
                            "stage {i}: squeeze needs even spatial dims, have {h}x{w}"
                        )));
                    }
                    c *= 4;
                    h /= 2;
                    w /= 2;
                }
                StageDesc::Split => {
                    if c % 2 != 0 {
                        return Err(FlowError::Config(format!(
                            "stage {i}: split needs even channels, have {c}"
                        )));
                    }
                    c /= 2;
                    latent_shapes.push((c, h, w));
                }
            }
        }
        latent_shapes.push((c, h, w));
        let total: usize = latent_shapes.iter().map(|&(c, h, w)| c * h * w).sum();
        if total != c0 * h0 * w0 {
            return Err(FlowError::Config(format!(
                "latent dims {total} != input dims {}",
                c0 * h0 * w0
            )));
        }
        Ok(Layout { stage_inputs, latent_shapes, total_dims: total })
    }
}

/// One full flow step.
#[derive(Clone, Debug)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub invconv: InvConv,
    pub coupling: Coupling,
    in_shape: (usize, usize, usize),
}

#[derive(Clone, Debug)]
pub enum Stage {
    Step(FlowStep),
    Squeeze,
    Split,
}

/// Per-stage data captured during a forward pass, consumed by attribution.
#[derive(Clone, Debug)]
pub enum StageRecord {
    Step {
        /// log_scale[c] at every element.
        actnorm_map: Tensor,
        /// sum(log_diag)/C at every element.
        invconv_map: Tensor,
        /// (1-M)*s1 + M*s2.
        coupling_map: Tensor,
    },
    Squeeze,
    Split {
        /// The latent sent to the prior at this split.
        z_out: Tensor,
    },
}

/// Values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    /// Split outputs in emission order, final latent last.
    pub latents: Vec<Tensor>,
    pub logdet: f64,
    pub log_prior: f64,
    pub log_likelihood: f64,
    pub records: Vec<StageRecord>,
}

/// Per-class scores from [`FlowModel::classify`].
#[derive(Clone, Debug)]
pub struct Classification {
    pub scores: Vec<f64>,
    pub argmax: usize,
}

pub struct FlowModel {
    pub config: FlowConfig,
    pub store: ParamStore,
    stages: Vec<Stage>,
    layout: Layout,
}

impl std::fmt::Debug for FlowModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowModel")
            .field("config", &self.config)
            .field("params", &self.store.len())
            .finish()
    }
}

pub(crate) struct TracedForward {
    pub nll: NodeId,
    pub result: ForwardResult,
}

impl FlowModel {
    /// Build a fresh model; parameter initialization is a pure function of
    /// the config (including its seed).
    pub fn build(config: FlowConfig) -> Result<FlowModel> {
        Self::build_with_perms(config, None)
    }

    /// Internal builder that can reuse stored 1x1-conv permutations
    /// (checkpoint restore path).
    pub(crate) fn build_with_perms(
        config: FlowConfig,
        perms: Option<Vec<Vec<usize>>>,
    ) -> Result<FlowModel> {
        let layout = config.layout()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(config.seed).derive(0xB111D);
        let mut stages = Vec::with_capacity(config.schedule.len());
        let mut step_idx = 0usize;
        let mut perm_iter = perms.map(|p| p.into_iter());
        for (i, desc) in config.schedule.iter().enumerate() {
            let in_shape = layout.stage_inputs[i];
            match desc {
                StageDesc::Step { mask, parity } => {
                    let (c, _, _) = in_shape;
                    let prefix = format!("step{step_idx:02}");
                    let actnorm = ActNorm::new(&mut store, &format!("{prefix}.actnorm"), c)?;
                    let invconv = match perm_iter.as_mut().map(|it| it.next()) {
                        Some(Some(perm)) => {
                            InvConv::with_perm(&mut store, &format!("{prefix}.invconv"), c, perm)?
                        }
                        Some(None) => {
                            return Err(FlowError::Contract(
                                "fewer stored permutations than flow steps".into(),
                            ))
                        }
                        None => InvConv::new(&mut store, &format!("{prefix}.invconv"), c, &mut rng)?,
                    };
                    let mask = make_mask(*mask, *parity, in_shape)?;
                    let kind = config.task.net_kind();
                    let net1 = CouplingNet::new(
                        &mut store,
                        &format!("{prefix}.net1"),
                        kind,
                        c,
                        config.num_classes,
                        config.hidden,
                        config.emb_width,
                        config.emb_channels,
                        config.s_max,
                        &mut rng,
                    )?;
                    let net2 = CouplingNet::new(
                        &mut store,
                        &format!("{prefix}.net2"),
                        kind,
                        c,
                        config.num_classes,
                        config.hidden,
                        config.emb_width,
                        config.emb_channels,
                        config.s_max,
                        &mut rng,
                    )?;
                    let coupling = Coupling::new(mask, net1, net2)?;
                    stages.push(Stage::Step(FlowStep { actnorm, invconv, coupling, in_shape }));
                    step_idx += 1;
                }
                StageDesc::Squeeze => stages.push(Stage::Squeeze),
                StageDesc::Split => stages.push(Stage::Split),
            }
        }
        if let Some(mut it) = perm_iter {
            if it.next().is_some() {
                return Err(FlowError::Contract(
                    "more stored permutations than flow steps".into(),
                ));
            }
        }
        Ok(FlowModel { config, store, stages, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub(crate) fn stages_mut(&mut self) -> &mut Vec<Stage> {
        &mut self.stages
    }

    pub fn num_flow_steps(&self) -> usize {
        self.stages.iter().filter(|s| matches!(s, Stage::Step(_))).count()
    }

    fn check_input(&self, x: &Tensor, label: usize) -> Result<()> {
        let (c, h, w) = self.config.in_shape;
        if x.shape() != [c, h, w] {
            return Err(FlowError::Dim(format!(
                "input shape {:?} vs model shape ({c},{h},{w})",
                x.shape()
            )));
        }
        if label >= self.config.num_classes {
            return Err(FlowError::Contract(format!(
                "label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Traced forward pass building the NLL node; shared by training and all
    /// evaluation paths so the arithmetic is identical everywhere.
    pub(crate) fn forward_on(
        &self,
        sess: &mut TraceSession,
        x: &Tensor,
        label: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<TracedForward> {
        self.check_input(x, label)?;
        let mut cur = sess.constant(x.clone());
        let mut logdet: Option<NodeId> = None;
        let mut log_prior: Option<NodeId> = None;
        let mut latents: Vec<NodeId> = Vec::new();
        let mut records: Vec<StageRecord> = Vec::new();

        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Step(step) => {
                    let ctx = |e: FlowError, what: &str| {
                        e.in_context(&format!("stage {i} ({what})"))
                    };
                    let (h, w) = (step.in_shape.1, step.in_shape.2);
                    let (y1, ld1) = step
                        .actnorm
                        .forward(sess, cur)
                        .map_err(|e| ctx(e, "actnorm"))?;
                    let (y2, ld2) = step
                        .invconv
                        .forward(sess, y1)
                        .map_err(|e| ctx(e, "invconv"))?;
                    let fwd = step
                        .coupling
                        .forward(sess, y2, label, rng.as_deref_mut())
                        .map_err(|e| ctx(e, "coupling"))?;
                    cur = fwd.y;
                    let l = add_opt(sess, logdet, ld1)?;
                    let l = add_opt(sess, Some(l), ld2)?;
                    logdet = Some(add_opt(sess, Some(l), fwd.logdet)?);
                    records.push(StageRecord::Step {
                        actnorm_map: step.actnorm.per_element_map(sess.store(), h, w)?,
                        invconv_map: step.invconv.per_element_map(sess.store(), h, w)?,
                        coupling_map: step.coupling.per_element_map(sess, &fwd)?,
                    });
                }
                Stage::Squeeze => {
                    cur = sess.tape.squeeze2x(cur)?;
                    records.push(StageRecord::Squeeze);
                }
                Stage::Split => {
                    let shape = sess.tape.value(cur).shape().to_vec();
                    let c = shape[0];
                    let keep = sess.tape.chan_slice(cur, 0, c / 2)?;
                    let out = sess.tape.chan_slice(cur, c / 2, c)?;
                    let lp = log_normal_node(sess, out)?;
                    log_prior = Some(add_opt(sess, log_prior, lp)?);
                    latents.push(out);
                    records.push(StageRecord::Split { z_out: sess.tape.value(out).clone() });
                    cur = keep;
                }
            }
        }
        let lp = log_normal_node(sess, cur)?;
        let log_prior = add_opt(sess, log_prior, lp)?;
        latents.push(cur);

        let logdet = match logdet {
            Some(n) => n,
            None => sess.constant(Tensor::scalar(0.0)?),
        };
        let ll = sess.tape.add(log_prior, logdet)?;
        let nll = sess.tape.mul_scalar(ll, -1.0)?;

        let result = ForwardResult {
            latents: latents.iter().map(|&n| sess.tape.value(n).clone()).collect(),
            logdet: sess.tape.value(logdet).item()?,
            log_prior: sess.tape.value(log_prior).item()?,
            log_likelihood: sess.tape.value(ll).item()?,
            records,
        };
        Ok(TracedForward { nll, result })
    }

    /// Forward transform in evaluation mode.
    pub fn forward(&self, x: &Tensor, label: usize) -> Result<ForwardResult> {
        let mut sess = TraceSession::new(&self.store, false);
        Ok(self.forward_on(&mut sess, x, label, None)?.result)
    }

    /// Evaluation-mode NLL and its gradients with respect to every parameter:
    /// the same backward pass training consumes, exposed for gradient checks
    /// and custom optimization loops.
    pub fn nll_gradients(&self, x: &Tensor, label: usize) -> Result<(f64, Gradients)> {
        let mut sess = TraceSession::new(&self.store, false);
        let traced = self.forward_on(&mut sess, x, label, None)?;
        let grads = sess.tape.backward(traced.nll)?;
        Ok((-traced.result.log_likelihood, grads))
    }

    /// Exact conditional log-likelihood in nats.
    pub fn log_likelihood(&self, x: &Tensor, label: usize) -> Result<f64> {
        Ok(self.forward(x, label)?.log_likelihood)
    }

    /// Per-class log-likelihoods and the argmax (ties break to the lowest
    /// class index).
    pub fn classify(&self, x: &Tensor) -> Result<Classification> {
        let mut scores = Vec::with_capacity(self.config.num_classes);
        for y in 0..self.config.num_classes {
            scores.push(self.log_likelihood(x, y)?);
        }
        let mut argmax = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[argmax] {
                argmax = i;
            }
        }
        Ok(Classification { scores, argmax })
    }

    /// Map latents back to data space; exact inverse of `forward`'s latent
    /// emission (split outputs first, final latent last).
    pub fn inverse(&self, latents: &[Tensor], label: usize) -> Result<Tensor> {
        if label >= self.config.num_classes {
            return Err(FlowError::Contract(format!(
                "label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let want = &self.layout.latent_shapes;
        if latents.len() != want.len() {
            return Err(FlowError::Dim(format!(
                "{} latents given, model wants {}",
                latents.len(),
                want.len()
            )));
        }
        for (t, &(c, h, w)) in latents.iter().zip(want) {
            if t.shape() != [c, h, w] {
                return Err(FlowError::Dim(format!(
                    "latent shape {:?} vs expected ({c},{h},{w})",
                    t.shape()
                )));
            }
        }
        let mut cur = latents[want.len() - 1].clone();
        let mut split_idx = want.len() - 1;
        for (i, stage) in self.stages.iter().enumerate().rev() {
            match stage {
                Stage::Step(step) => {
                    let ctx =
                        |e: FlowError, what: &str| e.in_context(&format!("stage {i} ({what})"));
                    cur = step
                        .coupling
                        .inverse(&self.store, &cur, label)
                        .map_err(|e| ctx(e, "coupling inverse"))?;
                    cur = step
                        .invconv
                        .inverse(&self.store, &cur)
                        .map_err(|e| ctx(e, "invconv inverse"))?;
                    cur = step
                        .actnorm
                        .inverse(&self.store, &cur)
                        .map_err(|e| ctx(e, "actnorm inverse"))?;
                }
                Stage::Squeeze => {
                    cur = cur.unsqueeze2x()?;
                }
                Stage::Split => {
                    split_idx -= 1;
                    cur = cur.concat_channels(&latents[split_idx])?;
                }
            }
        }
        Ok(cur)
    }

    /// Draw latents z_j ~ temperature * N(0, I) and invert. Deterministic
    /// given (rng state, label, temperature).
    pub fn sample(&self, label: usize, rng: &mut Rng, temperature: f64) -> Result<Tensor> {
        if temperature <= 0.0 {
            return Err(FlowError::Contract(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let mut latents = Vec::with_capacity(self.layout.latent_shapes.len());
        for &(c, h, w) in &self.layout.latent_shapes {
            latents.push(rng.normal_tensor(&[c, h, w])?.mul_scalar(temperature)?);
        }
        self.inverse(&latents, label)
    }
}

fn add_opt(sess: &mut TraceSession, acc: Option<NodeId>, x: NodeId) -> Result<NodeId> {
    match acc {
        Some(a) => sess.tape.add(a, x),
        None => Ok(x),
    }
}

/// log N(z; 0, I) = -d/2 * ln(2*pi) - ||z||^2 / 2, as a tape node.
fn log_normal_node(sess: &mut TraceSession, z: NodeId) -> Result<NodeId> {
    let d = sess.tape.value(z).len() as f64;
    let sq = sess.tape.mul(z, z)?;
    let ss = sess.tape.sum(sq)?;
    let half = sess.tape.mul_scalar(ss, -0.5)?;
    sess.tape.add_scalar(half, -0.5 * d * LN_2PI)
}

/// Elementwise log-normal density map: each element carries its own
/// -ln(2*pi)/2 - z^2/2 term; sums to log N(z).
pub fn log_normal_map(z: &Tensor) -> Result<Tensor> {
    z.mul(z)?.mul_scalar(-0.5)?.add_scalar(-0.5 * LN_2PI)
}
