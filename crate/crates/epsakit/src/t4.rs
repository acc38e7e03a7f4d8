//! `.t4` tensor container: four little-endian `u32` shape fields (N, C, H, W)
//! followed by N·C·H·W little-endian `f64` values. Parameter files are plain
//! concatenations of such records.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use epsakit_core::model::Model;
use epsakit_core::{Shape, Tensor};

use crate::error::{Error, Result};

pub const EXTENSION: &str = "t4";

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} does not fit in u32")))
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    let s = t.shape();
    for d in [s.n, s.c, s.h, s.w] {
        let d = u32::try_from(d).map_err(|e| std::io::Error::new(ErrorKind::InvalidInput, e))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record; `Ok(None)` on a clean end of input.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut header = [0u8; 16];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Format(format!("truncated header ({got} of 16 bytes)"))),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Format(e.to_string())),
        }
    }
    let field = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().expect("4-byte slice")) as usize;
    let shape = Shape::new(field(0), field(1), field(2), field(3))?;
    let mut bytes = vec![0u8; shape.numel() * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("truncated payload for shape {shape}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Some(Tensor::from_vec(shape, data)?))
}

pub fn save(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    for t in tensors {
        let s = t.shape();
        [s.n, s.c, s.h, s.w].into_iter().try_for_each(|d| dim(d).map(|_| ()))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tensors {
        write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Tensor>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(t) = read_tensor(&mut r)? {
        out.push(t);
    }
    Ok(out)
}

/// Writes every trainable tensor of `model` in gradient order.
pub fn save_params(path: &Path, model: &Model) -> Result<()> {
    let params: Vec<&Tensor> = model.named_params().iter().map(|p| p.tensor).collect();
    save(path, &params)
}

/// Overwrites the parameters of `model` from a file written by [`save_params`].
pub fn load_params(path: &Path, model: &mut Model) -> Result<()> {
    let loaded = load(path)?;
    let mut slots = model.params_mut();
    if loaded.len() != slots.len() {
        return Err(Error::Format(format!(
            "{} holds {} tensors, model has {}",
            path.display(),
            loaded.len(),
            slots.len()
        )));
    }
    for (slot, t) in slots.iter_mut().zip(&loaded) {
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "shape {} does not match parameter shape {}",
                t.shape(),
                slot.shape()
            )));
        }
    }
    for (slot, t) in slots.into_iter().zip(loaded) {
        *slot = t;
    }
    Ok(())
}
