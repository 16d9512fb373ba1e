//! Maximum-likelihood training: per-sample gradient tapes accumulated over a
//! batch, global-norm clipping, Adam. Single-threaded and fully deterministic
//! given (options, dataset order).

use std::time::Instant;

use super::{FlowModel, Stage};
use crate::error::{FlowError, Result};
use crate::tensor::{Rng, Tensor, TraceSession};

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Gradient global-norm ceiling; batches above it are rescaled onto it.
    pub clip_norm: f64,
    /// Seed for shuffling and dropout; independent of the model's init seed.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 50.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean negative log-likelihood over the epoch, in nats.
    pub nll: f64,
    pub seconds: f64,
}

/// Data-dependent ActNorm initialization: walk the schedule once with a
/// prefix of the dataset (dataset order, evaluation mode), setting each
/// step's scale/bias from the activations that actually reach it.
fn init_actnorms(model: &mut FlowModel, images: &[Tensor], labels: &[usize]) -> Result<()> {
    let mut cur: Vec<Tensor> = images.to_vec();
    let n_stages = model.stages.len();
    for i in 0..n_stages {
        match &mut model.stages[i] {
            Stage::Step(step) => {
                step.actnorm
                    .init_from_batch(&mut model.store, &cur)
                    .map_err(|e| e.in_context(&format!("stage {i} (actnorm init)")))?;
                let step = &*step;
                for (x, &label) in cur.iter_mut().zip(labels) {
                    let mut sess = TraceSession::new(&model.store, false);
                    let node = sess.constant(x.clone());
                    let (y1, _) = step.actnorm.forward(&mut sess, node)?;
                    let (y2, _) = step.invconv.forward(&mut sess, y1)?;
                    let fwd = step.coupling.forward(&mut sess, y2, label, None)?;
                    *x = sess.tape.value(fwd.y).clone();
                }
            }
            Stage::Squeeze => {
                for x in cur.iter_mut() {
                    *x = x.squeeze2x()?;
                }
            }
            Stage::Split => {
                for x in cur.iter_mut() {
                    let c = x.shape()[0];
                    *x = x.chan_slice(0, c / 2)?;
                }
            }
        }
    }
    Ok(())
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

/// Minimize mean NLL over the dataset. Returns per-epoch stats; `on_epoch`
/// fires after each epoch (progress reporting).
pub fn train(
    model: &mut FlowModel,
    images: &[Tensor],
    labels: &[usize],
    opts: &TrainOptions,
    mut on_epoch: Option<&mut dyn FnMut(&EpochStats)>,
) -> Result<Vec<EpochStats>> {
    if images.is_empty() {
        return Err(FlowError::Contract("training set is empty".into()));
    }
    if images.len() != labels.len() {
        return Err(FlowError::Contract(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    if opts.batch_size == 0 {
        return Err(FlowError::Config("batch_size must be at least 1".into()));
    }
    if opts.epochs == 0 {
        return Err(FlowError::Config("epochs must be at least 1".into()));
    }
    for (k, &y) in labels.iter().enumerate() {
        if y >= model.config.num_classes {
            return Err(FlowError::Contract(format!(
                "label {y} at index {k} out of range for {} classes",
                model.config.num_classes
            )));
        }
    }

    let n = images.len();
    if model
        .stages
        .iter()
        .any(|s| matches!(s, Stage::Step(st) if !st.actnorm.initialized))
    {
        let take = opts.batch_size.min(n);
        init_actnorms(model, &images[..take], &labels[..take])?;
    }

    let n_params = model.store.len();
    let mut adam = AdamState {
        m: model.store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
        v: model.store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
        t: 0,
    };
    let base_rng = Rng::new(opts.seed);
    let mut stats = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        base_rng.derive(1000 + epoch as u64).shuffle(&mut order);
        let mut nll_sum = 0.0;

        for (batch_no, batch) in order.chunks(opts.batch_size).enumerate() {
            let mut acc: Vec<Vec<f64>> =
                model.store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
            for (pos, &idx) in batch.iter().enumerate() {
                let stream = 0x10_0000 + (epoch * n + batch_no * opts.batch_size + pos) as u64;
                let mut drop_rng = base_rng.derive(stream);
                let mut sess = TraceSession::new(&model.store, true);
                let traced = model
                    .forward_on(&mut sess, &images[idx], labels[idx], Some(&mut drop_rng))
                    .map_err(|e| {
                        e.in_context(&format!("epoch {epoch} batch {batch_no} sample {idx}"))
                    })?;
                nll_sum += -traced.result.log_likelihood;
                let grads = sess.tape.backward(traced.nll).map_err(|e| {
                    e.in_context(&format!("epoch {epoch} batch {batch_no} sample {idx}"))
                })?;
                for (slot, g) in acc.iter_mut().zip(grads.dense(&model.store)?) {
                    for (a, b) in slot.iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut sq_norm = 0.0;
            for slot in acc.iter_mut() {
                for g in slot.iter_mut() {
                    *g *= scale;
                    sq_norm += *g * *g;
                }
            }
            let norm = sq_norm.sqrt();
            if !norm.is_finite() {
                return Err(FlowError::Numerical(format!(
                    "gradient norm is not finite (epoch {epoch} batch {batch_no})"
                )));
            }
            if norm > opts.clip_norm {
                let s = opts.clip_norm / norm;
                for slot in acc.iter_mut() {
                    for g in slot.iter_mut() {
                        *g *= s;
                    }
                }
            }

            adam.t += 1;
            let bc1 = 1.0 - opts.beta1.powi(adam.t as i32);
            let bc2 = 1.0 - opts.beta2.powi(adam.t as i32);
            for (pi, id) in model.store.ids().enumerate() {
                debug_assert!(pi < n_params);
                let old = model.store.get(id);
                let mut data = old.data().to_vec();
                let shape = old.shape().to_vec();
                for (j, g) in acc[pi].iter().enumerate() {
                    let m = &mut adam.m[pi][j];
                    let v = &mut adam.v[pi][j];
                    *m = opts.beta1 * *m + (1.0 - opts.beta1) * g;
                    *v = opts.beta2 * *v + (1.0 - opts.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    data[j] -= opts.learning_rate * m_hat / (v_hat.sqrt() + opts.adam_eps);
                }
                let name = model.store.name(id).to_string();
                let updated = Tensor::new(shape, data)
                    .map_err(|e| e.in_context(&format!("adam update of {name}")))?;
                model.store.set(id, updated)?;
            }
        }

        let stat = EpochStats {
            epoch,
            nll: nll_sum / n as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&stat);
        }
        stats.push(stat);
    }
    Ok(stats)
}
