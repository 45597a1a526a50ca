use std::io::{Read, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PVN1";
const VERSION: u32 = 1;

/// Little-endian: magic, u32 version, u32 clip count, u16 C/T/H/W, u32 class
/// count, then per clip a u32 label and `C·T·H·W` f32 values.
pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let [c, t, h, wd] = ds.clip_shape();
    let dims = [c, t, h, wd];
    if let Some(d) = dims.iter().find(|&&d| d > u16::MAX as usize) {
        return Err(Error::invalid(format!("clip extent {d} does not fit the format")));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&(d as u16).to_le_bytes())?;
    }
    w.write_all(&(ds.n_classes as u32).to_le_bytes())?;
    let per = c * t * h * wd;
    let mut buf = Vec::with_capacity(4 + 4 * per);
    for (i, &label) in ds.labels.iter().enumerate() {
        buf.clear();
        buf.extend_from_slice(&(label as u32).to_le_bytes());
        for v in &ds.clips.data()[i * per..(i + 1) * per] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("file truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn u32_at<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn u16_at<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("not a dataset file (magic {magic:?})")));
    }
    let version = u32_at(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = u32_at(&mut r, "clip count")? as usize;
    let mut dims = [0usize; 4];
    for (d, name) in dims.iter_mut().zip(["C", "T", "H", "W"]) {
        *d = u16_at(&mut r, name)? as usize;
        if *d == 0 {
            return Err(Error::Format(format!("extent {name} is zero")));
        }
    }
    let n_classes = u32_at(&mut r, "class count")? as usize;
    if n_classes == 0 {
        return Err(Error::Format("class count is zero".into()));
    }
    let per: usize = dims.iter().product();
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * per);
    let mut raw = vec![0u8; 4 * per];
    for i in 0..n {
        let label = u32_at(&mut r, &format!("label of clip {i}"))? as usize;
        if label >= n_classes {
            return Err(Error::Format(format!("clip {i} has label {label}, expected below {n_classes}")));
        }
        labels.push(label);
        read_exact(&mut r, &mut raw, &format!("clip {i}"))?;
        data.extend(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last clip".into()));
    }
    let [c, t, h, w] = dims;
    Dataset::new(Tensor::from_vec([n, c, t, h, w], data)?, labels, n_classes)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}
