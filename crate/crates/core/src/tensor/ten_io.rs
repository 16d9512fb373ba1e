//! `.ten` tensor files: magic "TEN1", rank as u32 LE, dims as u32 LE,
//! then f64 LE payload in row-major order. Round-trips are bit-exact.

use super::Tensor;
use crate::error::{FlowError, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TEN1";

pub fn write_ten(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 4 + 4 * t.rank() + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_ten(path: &Path) -> Result<Tensor> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    parse_ten(&bytes).map_err(|e| e.in_context(&path.display().to_string()))
}

fn parse_ten(bytes: &[u8]) -> Result<Tensor> {
    let fail = |m: &str| FlowError::Format(format!("bad .ten file: {m}"));
    if bytes.len() < 8 {
        return Err(fail("shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("wrong magic"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rank == 0 || rank > super::MAX_RANK {
        return Err(fail(&format!("rank {rank} out of range")));
    }
    let dims_end = 8 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fail("truncated dims"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != dims_end + 8 * n {
        return Err(fail(&format!(
            "payload length {} does not match shape {shape:?}",
            bytes.len() - dims_end
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = dims_end + 8 * i;
        data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
    }
    Tensor::new(shape, data)
}
