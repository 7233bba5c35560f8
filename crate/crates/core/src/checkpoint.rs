//! Binary parameter container shared by the encoder (`MOCO`) and the bag
//! classifier (`WMIL`) checkpoints.
//!
//! Layout: 4-byte magic, version `u16`, then one record per parameter in
//! sorted name order: name length `u16`, name bytes, rank `u8`, each dim as
//! `u32`, then the row-major `f64` payload. All integers and floats are
//! little-endian. Records run to end of file.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const ENCODER_MAGIC: [u8; 4] = *b"MOCO";
pub const MIL_MAGIC: [u8; 4] = *b"WMIL";
pub const VERSION: u16 = 1;

pub fn save_params(path: &Path, magic: [u8; 4], params: &ParamSet<f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let ioerr = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(&magic).map_err(ioerr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(ioerr)?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())
            .map_err(ioerr)?;
        w.write_all(name_bytes).map_err(ioerr)?;
        w.write_all(&[tensor.shape().len() as u8]).map_err(ioerr)?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes()).map_err(ioerr)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(ioerr)?;
        }
    }
    w.flush().map_err(ioerr)
}

/// Reader that tracks its byte offset so format errors can report where
/// the file went wrong.
struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            offset: at,
            detail: format!("{what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    /// Returns false at clean EOF before any byte of the next record.
    fn try_u16(&mut self) -> Result<Option<u16>> {
        let mut buf = [0u8; 2];
        match self.inner.read(&mut buf) {
            Ok(0) => Ok(None),
            Ok(2) => {
                self.offset += 2;
                Ok(Some(u16::from_le_bytes(buf)))
            }
            Ok(n) => Err(Error::Format {
                offset: self.offset + n as u64,
                detail: "truncated record header".into(),
            }),
            Err(e) => Err(Error::Format {
                offset: self.offset,
                detail: e.to_string(),
            }),
        }
    }
}

pub fn load_params(path: &Path, expected_magic: [u8; 4]) -> Result<ParamSet<f64>> {
    if !path.exists() {
        return Err(Error::MissingDependency(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Counted {
        inner: BufReader::new(file),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if magic != expected_magic {
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&expected_magic)
            ),
        });
    }
    let mut version = [0u8; 2];
    r.read_exact_at(&mut version, "version")?;
    let version = u16::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let mut params = ParamSet::new();
    while let Some(name_len) = r.try_u16()? {
        let mut name = vec![0u8; name_len as usize];
        r.read_exact_at(&mut name, "parameter name")?;
        let name = String::from_utf8(name).map_err(|e| Error::Format {
            offset: r.offset,
            detail: format!("non-utf8 parameter name: {e}"),
        })?;
        let mut rank = [0u8; 1];
        r.read_exact_at(&mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut dim = [0u8; 4];
            r.read_exact_at(&mut dim, "dimension")?;
            shape.push(u32::from_le_bytes(dim) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f64; numel];
        for v in data.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact_at(&mut buf, "payload")?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::from_vec(&shape, data)?;
        params.insert(&name, tensor)?;
    }
    Ok(params)
}
