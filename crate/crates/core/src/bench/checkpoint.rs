//! Binary tensor framing shared by checkpoints and dataset files.
//!
//! A file is the 6-byte magic `D2ETR1` followed by records of
//! `name_len u32 | name | rank u32 | dims u32.. | f64 payload`, all little endian.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"D2ETR1";

pub fn write_tensors<W: Write>(out: &mut W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    out.write_all(MAGIC)?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated record: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic).map_err(|_| Error::Format("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut out = Vec::new();
    loop {
        let mut first = [0u8; 4];
        match input.read(&mut first[..1])? {
            0 => break,
            _ => input.read_exact(&mut first[1..]).map_err(|e| Error::Format(format!("truncated record: {e}")))?,
        }
        let len = u32::from_le_bytes(first) as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not utf-8".into()))?;
        let rank = read_u32(input)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("'{name}': unsupported rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u32(input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        input.read_exact(&mut bytes).map_err(|e| Error::Format(format!("'{name}': truncated payload: {e}")))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(&mut BufReader::new(fs::File::open(path)?))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let tensors: Vec<_> = store.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    save_tensors(path, &tensors)
}

/// Reads a checkpoint as a fresh store, in file order.
pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in load_tensors(path)? {
        store.add(name, t).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(store)
}

/// Loads a checkpoint into an already-built model store.
pub fn restore_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    store.load_from(&load_checkpoint(path)?)
}
