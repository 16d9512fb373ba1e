//! Shared fixtures for the criterion benches: deterministic models and data
//! so numbers are comparable across runs and machines.

use magicflow_core::{FlowConfig, FlowModel, FlowTask, Rng, Tensor};

/// Full multiscale model on 1x16x16 with parameters moved off the all-zero
/// init, so the benched paths do real work (identity flows short-circuit
/// nothing, but zero scales make the numbers unrepresentative).
pub fn spiced_multiscale(task: FlowTask) -> FlowModel {
    let config = FlowConfig::multiscale(task, (1, 16, 16), 3, 7).unwrap();
    let mut model = FlowModel::build(config).unwrap();
    let mut rng = Rng::new(8);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let shape = model.store.get(id).shape().to_vec();
        // Amplitudes keep activations order-one. Anything larger saturates
        // the couplings' tanh clamp, and 24 steps of e^s_max compound into
        // astronomically large values.
        let amp = if name.ends_with(".log_scale")
            || name.ends_with(".bias")
            || name.ends_with(".log_diag")
        {
            0.01
        } else if name.ends_with(".lower") || name.ends_with(".upper") {
            0.05 / shape[0] as f64
        } else if name.contains("head_") {
            0.02
        } else if name.ends_with(".wg") || name.ends_with(".wb") {
            0.05
        } else {
            continue;
        };
        let t = rng.uniform_tensor(&shape, -amp, amp).unwrap();
        model.store.set(id, t).unwrap();
    }
    model
}

pub fn input_image(seed: u64) -> Tensor {
    Rng::new(seed).normal_tensor(&[1, 16, 16]).unwrap()
}

pub fn gaussian_cloud(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
}
