//! Binary checkpoint format, magic "MGFC" version 1: the full config, the
//! frozen 1x1-conv permutations, the ActNorm initialization flags, and every
//! named parameter tensor. Little-endian throughout. A loaded model is
//! bit-identical to the saved one.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FlowConfig, FlowModel, FlowTask, Stage, StageDesc};
use crate::error::{FlowError, Result};
use crate::layers::MaskKind;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MGFC";
const VERSION: u32 = 1;

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn w_str(w: &mut impl Write, s: &str) -> Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn fill(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            FlowError::Format("checkpoint truncated".into())
        } else {
            FlowError::Io(e)
        }
    })
}

fn r_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    fill(r, &mut b)?;
    Ok(b[0])
}

fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    fill(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    fill(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    fill(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn r_str(r: &mut impl Read) -> Result<String> {
    let len = r_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(FlowError::Format(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    fill(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| FlowError::Format("non-utf8 name in checkpoint".into()))
}

fn task_tag(t: FlowTask) -> u8 {
    match t {
        FlowTask::Generation => 0,
        FlowTask::Classification => 1,
    }
}

fn mask_tag(m: MaskKind) -> u8 {
    match m {
        MaskKind::Checkerboard => 0,
        MaskKind::Channelwise => 1,
        MaskKind::Application => 2,
    }
}

pub fn save_checkpoint(model: &FlowModel, path: &Path) -> Result<()> {
    let ctx = |e: FlowError| e.in_context(&path.display().to_string());
    save_inner(model, path).map_err(ctx)
}

fn save_inner(model: &FlowModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let cfg = &model.config;
    w.write_all(MAGIC)?;
    w_u32(&mut w, VERSION)?;

    w.write_all(&[task_tag(cfg.task)])?;
    w_u32(&mut w, cfg.in_shape.0 as u32)?;
    w_u32(&mut w, cfg.in_shape.1 as u32)?;
    w_u32(&mut w, cfg.in_shape.2 as u32)?;
    w_u32(&mut w, cfg.num_classes as u32)?;
    w_u32(&mut w, cfg.hidden as u32)?;
    w_u32(&mut w, cfg.emb_width as u32)?;
    w_u32(&mut w, cfg.emb_channels as u32)?;
    w_f64(&mut w, cfg.s_max)?;
    w_u64(&mut w, cfg.seed)?;
    w_u32(&mut w, cfg.schedule.len() as u32)?;
    for stage in &cfg.schedule {
        match stage {
            StageDesc::Step { mask, parity } => w.write_all(&[0, mask_tag(*mask), *parity])?,
            StageDesc::Squeeze => w.write_all(&[1])?,
            StageDesc::Split => w.write_all(&[2])?,
        }
    }

    let steps: Vec<_> = model
        .stages
        .iter()
        .filter_map(|s| match s {
            Stage::Step(st) => Some(st),
            _ => None,
        })
        .collect();
    w_u32(&mut w, steps.len() as u32)?;
    for st in &steps {
        let perm = st.invconv.perm();
        w_u32(&mut w, perm.len() as u32)?;
        for &p in perm {
            w_u32(&mut w, p as u32)?;
        }
    }
    for st in &steps {
        w.write_all(&[u8::from(st.actnorm.initialized)])?;
    }

    w_u32(&mut w, model.store.len() as u32)?;
    for (_, name, tensor) in model.store.iter() {
        w_str(&mut w, name)?;
        w_u32(&mut w, tensor.rank() as u32)?;
        for &d in tensor.shape() {
            w_u32(&mut w, d as u32)?;
        }
        for &v in tensor.data() {
            w_f64(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<FlowModel> {
    let ctx = |e: FlowError| e.in_context(&path.display().to_string());
    load_inner(path).map_err(ctx)
}

fn load_inner(path: &Path) -> Result<FlowModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    fill(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(FlowError::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r_u32(&mut r)?;
    if version != VERSION {
        return Err(FlowError::Format(format!("unsupported checkpoint version {version}")));
    }

    let task = match r_u8(&mut r)? {
        0 => FlowTask::Generation,
        1 => FlowTask::Classification,
        t => return Err(FlowError::Format(format!("unknown task tag {t}"))),
    };
    let c = r_u32(&mut r)? as usize;
    let h = r_u32(&mut r)? as usize;
    let w = r_u32(&mut r)? as usize;
    let num_classes = r_u32(&mut r)? as usize;
    let hidden = r_u32(&mut r)? as usize;
    let emb_width = r_u32(&mut r)? as usize;
    let emb_channels = r_u32(&mut r)? as usize;
    let s_max = r_f64(&mut r)?;
    let seed = r_u64(&mut r)?;
    let n_stages = r_u32(&mut r)? as usize;
    if n_stages > 1 << 16 {
        return Err(FlowError::Format(format!("implausible stage count {n_stages}")));
    }
    let mut schedule = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        match r_u8(&mut r)? {
            0 => {
                let mask = match r_u8(&mut r)? {
                    0 => MaskKind::Checkerboard,
                    1 => MaskKind::Channelwise,
                    2 => MaskKind::Application,
                    m => return Err(FlowError::Format(format!("unknown mask tag {m}"))),
                };
                let parity = r_u8(&mut r)?;
                schedule.push(StageDesc::Step { mask, parity });
            }
            1 => schedule.push(StageDesc::Squeeze),
            2 => schedule.push(StageDesc::Split),
            t => return Err(FlowError::Format(format!("unknown stage tag {t}"))),
        }
    }
    let config = FlowConfig {
        task,
        in_shape: (c, h, w),
        num_classes,
        schedule,
        hidden,
        emb_width,
        emb_channels,
        s_max,
        seed,
    };

    let n_steps = r_u32(&mut r)? as usize;
    if n_steps > 1 << 16 {
        return Err(FlowError::Format(format!("implausible step count {n_steps}")));
    }
    let mut perms = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let len = r_u32(&mut r)? as usize;
        if len > 1 << 16 {
            return Err(FlowError::Format(format!("implausible permutation length {len}")));
        }
        let mut perm = Vec::with_capacity(len);
        for _ in 0..len {
            perm.push(r_u32(&mut r)? as usize);
        }
        perms.push(perm);
    }
    let mut flags = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        flags.push(match r_u8(&mut r)? {
            0 => false,
            1 => true,
            f => return Err(FlowError::Format(format!("bad actnorm flag {f}"))),
        });
    }

    let mut model = FlowModel::build_with_perms(config, Some(perms))?;
    {
        let mut step_iter = flags.into_iter();
        for stage in model.stages_mut().iter_mut() {
            if let Stage::Step(st) = stage {
                st.actnorm.initialized = step_iter.next().ok_or_else(|| {
                    FlowError::Format("fewer actnorm flags than flow steps".into())
                })?;
            }
        }
        if step_iter.next().is_some() {
            return Err(FlowError::Format("more actnorm flags than flow steps".into()));
        }
    }

    let n_params = r_u32(&mut r)? as usize;
    if n_params != model.store.len() {
        return Err(FlowError::Format(format!(
            "checkpoint has {n_params} parameters, config implies {}",
            model.store.len()
        )));
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = r_str(&mut r)?;
        if name != model.store.name(id) {
            return Err(FlowError::Format(format!(
                "parameter name {name:?} does not match expected {:?}",
                model.store.name(id)
            )));
        }
        let rank = r_u32(&mut r)? as usize;
        if rank > 4 {
            return Err(FlowError::Format(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r_u32(&mut r)? as usize);
        }
        let count: usize = shape.iter().product();
        if count > 1 << 28 {
            return Err(FlowError::Format(format!("implausible size for {name}")));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r_f64(&mut r)?);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| e.in_context(&format!("parameter {name}")))?;
        model.store.set(id, tensor)?;
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(model),
        _ => Err(FlowError::Format("trailing bytes after checkpoint".into())),
    }
}
