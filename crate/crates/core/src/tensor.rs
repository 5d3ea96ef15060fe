//! Self-describing binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes   "CVT1"
//! rank    u64
//! dims    rank x u64
//! dtype   u32       1 = f32
//! payload product(dims) x f32, row-major
//! ```
//!
//! An optional JSON sidecar (`<file>.json`) carries free-form metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, Dimension, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVT1";
pub const DTYPE_F32: u32 = 1;

/// File extension used for tensor files.
pub const EXTENSION: &str = "cvt";

/// Row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Narrowing conversion from an f64 array.
    pub fn from_array<D: Dimension>(a: &ndarray::Array<f64, D>) -> Self {
        Self {
            dims: a.shape().to_vec(),
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_usize_array<D: Dimension>(a: &ndarray::Array<usize, D>) -> Self {
        Self {
            dims: a.shape().to_vec(),
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_array<D: Dimension>(&self) -> Result<ndarray::Array<f64, D>> {
        let a = ArrayD::from_shape_vec(
            IxDyn(&self.dims),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("validated length");
        a.into_dimensionality::<D>().map_err(|_| {
            Error::ShapeMismatch(format!(
                "tensor of rank {} where rank {:?} was expected",
                self.dims.len(),
                D::NDIM
            ))
        })
    }

    /// Interprets the payload as non-negative integer indices.
    pub fn to_index_array<D: Dimension>(&self) -> Result<ndarray::Array<usize, D>> {
        let a = self.to_array::<D>()?;
        if a.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Format("index tensor holds non-integer values".into()));
        }
        Ok(a.mapv(|v| v as usize))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dims.len() as u64).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&DTYPE_F32.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dims.len() + 4 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Format(format!("truncated tensor: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut u64_buf = [0u8; 8];
        r.read_exact(&mut u64_buf).map_err(io)?;
        let rank = u64::from_le_bytes(u64_buf);
        if rank > 16 {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            r.read_exact(&mut u64_buf).map_err(io)?;
            dims.push(u64::from_le_bytes(u64_buf) as usize);
        }
        let mut u32_buf = [0u8; 4];
        r.read_exact(&mut u32_buf).map_err(io)?;
        let dtype = u32::from_le_bytes(u32_buf);
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file)).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Writes the tensor and a pretty-printed JSON sidecar next to it.
    pub fn save_with_sidecar(&self, path: impl AsRef<Path>, meta: &serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        self.save(path)?;
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(meta).map_err(|e| Error::json(&side, e))?;
        std::fs::write(&side, text + "\n").map_err(|e| Error::io(side, e))
    }

    /// Reads the sidecar of `path`, if present.
    pub fn load_sidecar(path: impl AsRef<Path>) -> Result<Option<serde_json::Value>> {
        let side = sidecar_path(path.as_ref());
        match std::fs::read_to_string(&side) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| Error::json(side, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(side, e)),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
