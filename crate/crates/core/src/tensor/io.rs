//! `HVPL-MAT v1` array container.
//!
//! One record is: magic `HVPLMAT1`, little-endian `u32` dtype code
//! (0 = f32, 1 = f64), `u32` rank, `rank × u64` dims, then the row-major
//! payload in the chosen dtype. Files may hold several records back to back.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{HvplError, Result};

use super::{Matrix, Tensor3};

pub const MAGIC: &[u8; 8] = b"HVPLMAT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// A decoded record: dims plus values widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn from_matrix(m: &Matrix, dtype: Dtype) -> Self {
        Array {
            dtype,
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn from_tensor3(t: &Tensor3, dtype: Dtype) -> Self {
        let (a, b, c) = t.dims();
        Array {
            dtype,
            dims: vec![a, b, c],
            data: t.data().to_vec(),
        }
    }

    pub fn from_vector(v: &[f64], dtype: Dtype) -> Self {
        Array {
            dtype,
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.data),
            other => Err(HvplError::shape("into_matrix", format!("rank {} record", other.len()))),
        }
    }

    pub fn into_tensor3(self) -> Result<Tensor3> {
        match self.dims.as_slice() {
            [a, b, c] => Tensor3::from_vec(*a, *b, *c, self.data),
            other => Err(HvplError::shape("into_tensor3", format!("rank {} record", other.len()))),
        }
    }

    pub fn encoded_len(&self) -> usize {
        8 + 4 + 4 + 8 * self.dims.len() + self.data.len() * self.dtype.width()
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.dtype.code().to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        match self.dtype {
            Dtype::F32 => {
                for v in &self.data {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
}

/// Header of one record, as printed by `fmt-dump`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub offset: usize,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub payload_bytes: usize,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_header(cur: &mut Cursor<'_>) -> std::result::Result<Header, String> {
    let offset = cur.pos;
    if cur.take(8)? != MAGIC {
        return Err(format!("bad magic at offset {offset}"));
    }
    let code = cur.u32()?;
    let dtype = Dtype::from_code(code).ok_or_else(|| format!("unknown dtype code {code}"))?;
    let rank = cur.u32()? as usize;
    if rank > 8 {
        return Err(format!("implausible rank {rank}"));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(usize::try_from(cur.u64()?).map_err(|_| "dimension overflow".to_string())?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or("element count overflow")?;
    let payload_bytes = count
        .checked_mul(dtype.width())
        .ok_or("payload size overflow")?;
    Ok(Header {
        offset,
        dtype,
        dims,
        payload_bytes,
    })
}

/// Decodes every record in `bytes`.
pub fn decode_all(bytes: &[u8]) -> std::result::Result<Vec<Array>, String> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let h = read_header(&mut cur)?;
        let payload = cur.take(h.payload_bytes)?;
        let data = match h.dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        out.push(Array {
            dtype: h.dtype,
            dims: h.dims,
            data,
        });
    }
    Ok(out)
}

pub fn read_headers(bytes: &[u8]) -> std::result::Result<Vec<Header>, String> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let h = read_header(&mut cur)?;
        cur.take(h.payload_bytes)?;
        out.push(h);
    }
    Ok(out)
}

pub fn write_arrays(path: &Path, arrays: &[Array]) -> Result<()> {
    let mut buf = Vec::with_capacity(arrays.iter().map(Array::encoded_len).sum());
    for a in arrays {
        a.encode(&mut buf);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HvplError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| HvplError::io(path, e))?;
    f.write_all(&buf).map_err(|e| HvplError::io(path, e))
}

pub fn read_arrays(path: &Path) -> Result<Vec<Array>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| HvplError::io(path, e))?;
    decode_all(&bytes).map_err(|msg| HvplError::Format {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn save_matrix(path: &Path, m: &Matrix, dtype: Dtype) -> Result<()> {
    write_arrays(path, &[Array::from_matrix(m, dtype)])
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let mut arrays = read_arrays(path)?;
    if arrays.len() != 1 {
        return Err(HvplError::Format {
            path: path.to_path_buf(),
            msg: format!("expected one record, found {}", arrays.len()),
        });
    }
    arrays.remove(0).into_matrix()
}
