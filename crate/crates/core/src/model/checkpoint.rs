use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ops::ParamStore;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"PVNW";
const VERSION: u32 = 1;

/// Writes every parameter and buffer: magic, `u32` version, then per tensor
/// a `u16`-length UTF-8 name, five `u32` extents and `f32` data, all
/// little-endian. The file ends after the last tensor.
pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in store.named_params().chain(store.named_buffers()) {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        for d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("{name}: extent {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Named tensors of a checkpoint stream, in file order.
pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("checkpoint truncated in header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 2];
        match r.read(&mut len[..1])? {
            0 => break,
            _ => r.read_exact(&mut len[1..]).map_err(|_| truncated())?,
        }
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|_| truncated())?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut shape = [0usize; 5];
        for d in &mut shape {
            *d = read_u32(&mut r)? as usize;
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("{name}: shape {shape:?} overflows")))?;
        let mut bytes = vec![0u8; n.checked_mul(4).ok_or_else(truncated)?];
        r.read_exact(&mut bytes).map_err(|_| truncated())?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

fn truncated() -> Error {
    Error::Format("checkpoint truncated".into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(store, io::BufWriter::new(f))
}

/// Loads a checkpoint into `store`, which must hold exactly the same names
/// and shapes.
pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let f = std::fs::File::open(path)?;
    let tensors = read_checkpoint::<T, _>(io::BufReader::new(f))?;
    if tensors.len() != store.num_tensors() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, network has {}",
            tensors.len(),
            store.num_tensors()
        )));
    }
    for (name, t) in tensors {
        store.assign(&name, t)?;
    }
    Ok(())
}
