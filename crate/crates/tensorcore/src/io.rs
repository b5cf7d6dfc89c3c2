//! Binary tensor files.
//!
//! Layout, all little-endian: `u32` rank, then `rank` dimensions as `u64`,
//! then the row-major payload (`f64` for tensors, `i32` for label maps).

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::tensor::{Tensor, MAX_RANK};

fn write_header<W: Write>(w: &mut W, shape: &[usize]) -> Result<()> {
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(TensorError::invalid(format!("bad tensor file rank {rank}")));
    }
    let mut b8 = [0u8; 8];
    (0..rank)
        .map(|_| {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8) as usize)
        })
        .collect()
}

fn ensure_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(TensorError::invalid("trailing bytes after tensor payload"));
    }
    Ok(())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_header(w, t.shape())?;
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let shape = read_header(r)?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    ensure_eof(r)?;
    let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Tensor::new(&shape, data)
}

pub fn write_labels<W: Write>(w: &mut W, shape: &[usize], labels: &[i32]) -> Result<()> {
    if shape.iter().product::<usize>() != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "write_labels",
            detail: format!("shape {shape:?} with {} labels", labels.len()),
        });
    }
    write_header(w, shape)?;
    let mut buf = Vec::with_capacity(labels.len() * 4);
    for v in labels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_labels<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<i32>)> {
    let shape = read_header(r)?;
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    ensure_eof(r)?;
    let labels = buf.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
    Ok((shape, labels))
}

pub fn save_tensor(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: &std::path::Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    read_tensor(&mut bytes.as_slice())
}
