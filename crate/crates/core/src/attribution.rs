//! Per-element likelihood attribution: decomposes log p(x|y) into a map the
//! shape of the input whose entries sum to the exact log-likelihood. The map
//! accumulates backward through the flow: start from the deepest latent's
//! elementwise prior, add each step's per-element logdet shares, concatenate
//! factored latents back in at splits, unsqueeze at squeezes.

use std::path::Path;

use crate::error::{FlowError, Result};
use crate::model::{log_normal_map, FlowModel, StageRecord};
use crate::tensor::{write_ten, Tensor};

/// Elementwise log-likelihood contributions; `values` has the input's shape
/// and sums to `total`, the conditional log-likelihood in nats.
#[derive(Clone, Debug)]
pub struct AttributionMap {
    pub values: Tensor,
    pub total: f64,
}

/// One entry of the backward accumulation walk: the running map's shape after
/// this stage was absorbed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributionStage {
    pub stage: usize,
    pub kind: &'static str,
    pub map_shape: Vec<usize>,
}

/// Attribution map H(x,y); the walk mirrors the forward schedule in reverse.
pub fn attribution_map(model: &FlowModel, x: &Tensor, y: usize) -> Result<AttributionMap> {
    Ok(attribution_trace(model, x, y)?.0)
}

/// Same walk, also reporting the per-stage shape chain (diagnostics).
pub fn attribution_trace(
    model: &FlowModel,
    x: &Tensor,
    y: usize,
) -> Result<(AttributionMap, Vec<AttributionStage>)> {
    let fwd = model.forward(x, y)?;
    let deepest = fwd
        .latents
        .last()
        .ok_or_else(|| FlowError::Contract("forward produced no latents".into()))?;
    let mut map = log_normal_map(deepest)?;
    let mut trace = Vec::with_capacity(fwd.records.len());
    for (i, rec) in fwd.records.iter().enumerate().rev() {
        let kind = match rec {
            StageRecord::Step { actnorm_map, invconv_map, coupling_map } => {
                map = map.add(actnorm_map)?.add(invconv_map)?.add(coupling_map)?;
                "step"
            }
            StageRecord::Squeeze => {
                map = map.unsqueeze2x()?;
                "squeeze"
            }
            StageRecord::Split { z_out } => {
                map = map.concat_channels(&log_normal_map(z_out)?)?;
                "split"
            }
        };
        trace.push(AttributionStage { stage: i, kind, map_shape: map.shape().to_vec() });
    }
    let (c, h, w) = model.config.in_shape;
    if map.shape() != [c, h, w] {
        return Err(FlowError::Dim(format!(
            "accumulated map shape {:?} does not match input ({c},{h},{w})",
            map.shape()
        )));
    }
    let total = map.sum();
    Ok((AttributionMap { values: map, total }, trace))
}

/// Min-max rendering of a tensor as 8-bit graymap rows: rank-3 (C,H,W) stacks
/// channels vertically, rank-2 is taken as-is, rank-1 becomes a single row.
/// Degenerate min=max maps everything to mid-gray 128. Returns the byte grid
/// and the (min, max) used.
pub fn render_gray(values: &Tensor) -> Result<(Vec<u8>, usize, usize, f64, f64)> {
    let (rows, cols) = match values.shape() {
        [c, h, w] => (c * h, *w),
        [h, w] => (*h, *w),
        [n] => (1, *n),
        s => {
            return Err(FlowError::Dim(format!(
                "graymap rendering wants rank 1-3, got shape {s:?}"
            )))
        }
    };
    let data = values.data();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let bytes = if lo == hi {
        vec![128u8; data.len()]
    } else {
        data.iter()
            .map(|&v| {
                let t = ((v - lo) * 255.0 / (hi - lo)).floor();
                t.clamp(0.0, 255.0) as u8
            })
            .collect()
    };
    Ok((bytes, rows, cols, lo, hi))
}

fn write_pgm(path: &Path, bytes: &[u8], rows: usize, cols: usize) -> Result<()> {
    let mut out = Vec::with_capacity(bytes.len() + 32);
    out.extend_from_slice(format!("P5\n{cols} {rows}\n255\n").as_bytes());
    out.extend_from_slice(bytes);
    std::fs::write(path, out)
        .map_err(|e| FlowError::Io(e).in_context(&path.display().to_string()))
}

/// Write `<base>.ten` (raw), `<base>.pgm` (P5 min-max rendering), and
/// `<base>.scale.txt` recording the normalization constants, so the rendering
/// is reversible.
pub fn export_graymap(values: &Tensor, base: &Path) -> Result<()> {
    let base_str = base.display().to_string();
    let (bytes, rows, cols, lo, hi) = render_gray(values)?;
    write_ten(Path::new(&format!("{base_str}.ten")), values)?;
    write_pgm(Path::new(&format!("{base_str}.pgm")), &bytes, rows, cols)?;
    let sidecar = format!("min={lo} max={hi}\n");
    let scale_path = format!("{base_str}.scale.txt");
    std::fs::write(&scale_path, sidecar)
        .map_err(|e| FlowError::Io(e).in_context(&scale_path))?;
    Ok(())
}

/// [`export_graymap`] for an attribution map.
pub fn export_heatmap(map: &AttributionMap, base: &Path) -> Result<()> {
    export_graymap(&map.values, base)
}
