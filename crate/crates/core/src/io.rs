//! Binary tensor container (`CRT1`) and the multi-tensor archive built on it.
//!
//! A container is the magic bytes `CRT1` followed by little-endian `u32`
//! version (1), `u32` dtype code (0 = f32, 1 = f64), `u32` ndim, `ndim` `u32`
//! extents, and the row-major payload.
//!
//! An archive (`.crt1a`) is a UTF-8 text head followed by a binary body:
//!
//! ```text
//! CRT1A 1\n
//! <path>\t<offset>\t<shape>\n     one line per entry, in order
//! \n                              blank line ends the manifest
//! <body>                          the entries' CRT1 containers, back to back
//! ```
//!
//! `offset` is the byte position of the entry's container relative to the
//! start of the body, and `shape` is the extents joined with `x` (`4x32x32`).

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{DTypeMode, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"CRT1";
pub const VERSION: u32 = 1;
pub const ARCHIVE_HEADER: &str = "CRT1A 1";

/// A decoded container, kept in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32 { shape, .. } | TensorData::F64 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> DTypeMode {
        match self {
            TensorData::F32 { .. } => DTypeMode::Standard32,
            TensorData::F64 { .. } => DTypeMode::Verify64,
        }
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        let shape = t.shape().to_vec();
        match T::MODE {
            DTypeMode::Standard32 => TensorData::F32 {
                shape,
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            },
            DTypeMode::Verify64 => TensorData::F64 {
                shape,
                data: t.data().iter().map(|v| v.as_f64()).collect(),
            },
        }
    }

    /// Converts to a constant tensor of element type `T`. Values pass through
    /// unchanged when the stored precision matches `T`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let (shape, data): (&[usize], Vec<T>) = match self {
            TensorData::F32 { shape, data } => (shape, data.iter().map(|&v| T::lit(v as f64)).collect()),
            TensorData::F64 { shape, data } => (shape, data.iter().map(|&v| T::lit(v)).collect()),
        };
        Tensor::from_vec(shape, data).expect("decoded shape matches payload")
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            TensorData::F32 { data, .. } => data.iter().map(|&v| v as f64).collect(),
            TensorData::F64 { data, .. } => data.clone(),
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.dtype().code().to_le_bytes());
        out.extend_from_slice(&(self.shape().len() as u32).to_le_bytes());
        for &d in self.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match self {
            TensorData::F32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            TensorData::F64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
}

pub fn encode_tensor<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.ndim() + t.numel() * T::MODE.byte_width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::MODE.code().to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            file: self.file.to_path_buf(),
            offset: self.base + self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: need {n} bytes for {what}, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decodes one container from the front of `bytes`. `file` and `base` only
/// label error positions. Returns the tensor and the number of bytes consumed.
pub fn decode(bytes: &[u8], file: &Path, base: u64) -> Result<(TensorData, usize)> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        file,
        base,
    };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        c.pos = 0;
        return Err(c.fail(format!("bad magic {magic:?}, expected \"CRT1\"")));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        c.pos -= 4;
        return Err(c.fail(format!("unsupported version {version}")));
    }
    let code = c.u32("dtype")?;
    let dtype = DTypeMode::from_code(code).ok_or_else(|| {
        Error::Format {
            file: file.to_path_buf(),
            offset: base + c.pos as u64 - 4,
            detail: format!("unknown dtype code {code}"),
        }
    })?;
    let ndim = c.u32("ndim")? as usize;
    if ndim > 16 {
        return Err(c.fail(format!("implausible ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(c.u32("extent")? as usize);
    }
    let n: usize = shape.iter().product();
    let width = dtype.byte_width();
    let payload = c.take(n.checked_mul(width).ok_or_else(|| c.fail("payload size overflows"))?, "payload")?;
    let data = match dtype {
        DTypeMode::Standard32 => TensorData::F32 {
            shape,
            data: payload.chunks_exact(4).map(f32::read_le).collect(),
        },
        DTypeMode::Verify64 => TensorData::F64 {
            shape,
            data: payload.chunks_exact(8).map(f64::read_le).collect(),
        },
    };
    Ok((data, c.pos))
}

pub fn write_tensor_file<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

/// Reads a file holding exactly one container.
pub fn read_tensor_file(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes, path, 0)?;
    if used != bytes.len() {
        return Err(Error::Format {
            file: path.to_path_buf(),
            offset: used as u64,
            detail: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}

/// Ordered collection of named tensors stored as one archive file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub entries: IndexMap<String, TensorData>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: TensorData) {
        self.entries.insert(path.into(), t);
    }

    pub fn insert_tensor<T: Element>(&mut self, path: impl Into<String>, t: &Tensor<T>) {
        self.insert(path, TensorData::from_tensor(t));
    }

    pub fn get(&self, path: &str) -> Option<&TensorData> {
        self.entries.get(path)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        let mut head = String::from(ARCHIVE_HEADER);
        head.push('\n');
        for (path, t) in &self.entries {
            if path.is_empty() || path.contains(['\t', '\n', '\r']) {
                return Err(Error::invalid("archive", format!("invalid entry path {path:?}")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("{path}\t{}\t{}\n", body.len(), dims.join("x")));
            t.encode(&mut body);
        }
        head.push('\n');
        let mut out = head.into_bytes();
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], file: &Path) -> Result<Self> {
        let fail = |offset: usize, detail: String| Error::Format {
            file: file.to_path_buf(),
            offset: offset as u64,
            detail,
        };
        // manifest ends at the first empty line
        let mut lines = Vec::new();
        let mut pos = 0;
        loop {
            let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
                return Err(fail(pos, "truncated manifest".into()));
            };
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| fail(pos, "manifest is not UTF-8".into()))?;
            if line.is_empty() {
                pos += 1;
                break;
            }
            lines.push((pos, line));
            pos += nl + 1;
        }
        let Some(((_, header), rest)) = lines.split_first() else {
            return Err(fail(0, "empty manifest".into()));
        };
        if *header != ARCHIVE_HEADER {
            return Err(fail(0, format!("bad archive header {header:?}")));
        }
        let body = &bytes[pos..];
        let mut entries = IndexMap::new();
        for &(lpos, line) in rest {
            let mut fields = line.split('\t');
            let (Some(path), Some(off), Some(shape), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(fail(lpos, format!("manifest line {line:?} needs 3 tab-separated fields")));
            };
            let off: usize = off
                .parse()
                .map_err(|_| fail(lpos, format!("bad offset {off:?}")))?;
            if off > body.len() {
                return Err(fail(pos + body.len(), format!("truncated: entry `{path}` starts past end of file")));
            }
            let (t, _) = decode(&body[off..], file, (pos + off) as u64)?;
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            if dims.join("x") != shape {
                return Err(fail(lpos, format!("entry `{path}` manifest shape {shape} disagrees with container {:?}", t.shape())));
            }
            if entries.insert(path.to_string(), t).is_some() {
                return Err(fail(lpos, format!("duplicate entry `{path}`")));
            }
        }
        Ok(Archive { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
