//! Minimal NPY reader/writer for 2-D little-endian float matrices.
//!
//! Reads format versions 1.0, 2.0 and 3.0 with `<f4`/`<f8` payloads in C order;
//! always writes version 1.0.

use std::io::{Read, Write};

/// The npy magic string.
const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpyDtype {
    F32,
    F64,
}

impl NpyDtype {
    fn descr(self) -> &'static str {
        match self {
            NpyDtype::F32 => "<f4",
            NpyDtype::F64 => "<f8",
        }
    }

    fn width(self) -> usize {
        match self {
            NpyDtype::F32 => 4,
            NpyDtype::F64 => 8,
        }
    }
}

/// Row-major matrix decoded from an npy file; values are always promoted to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyMatrix {
    pub rows: usize,
    pub cols: usize,
    pub dtype: NpyDtype,
    pub data: Vec<f64>,
}

pub fn read_matrix<R: Read>(reader: &mut R) -> Result<NpyMatrix, String> {
    let mut magic = [0u8; 6];
    reader
        .read_exact(&mut magic)
        .map_err(|e| format!("reading magic: {e}"))?;
    if &magic != MAGIC {
        return Err("missing \\x93NUMPY magic".into());
    }
    let mut version = [0u8; 2];
    reader
        .read_exact(&mut version)
        .map_err(|e| format!("reading version: {e}"))?;
    let header_len = match version[0] {
        1 => {
            let mut b = [0u8; 2];
            reader.read_exact(&mut b).map_err(|e| e.to_string())?;
            u16::from_le_bytes(b) as usize
        }
        2 | 3 => {
            let mut b = [0u8; 4];
            reader.read_exact(&mut b).map_err(|e| e.to_string())?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(format!("unsupported npy version {v}.{}", version[1])),
    };
    let mut header = vec![0u8; header_len];
    reader
        .read_exact(&mut header)
        .map_err(|e| format!("reading header: {e}"))?;
    let header = String::from_utf8(header).map_err(|_| "header is not utf-8".to_string())?;

    let descr = dict_value(&header, "descr").ok_or("header lacks `descr`")?;
    let dtype = match descr.trim_matches(|c| c == '\'' || c == '"') {
        "<f4" => NpyDtype::F32,
        "<f8" => NpyDtype::F64,
        other => return Err(format!("unsupported dtype {other}; expected <f4 or <f8")),
    };
    let fortran = dict_value(&header, "fortran_order").ok_or("header lacks `fortran_order`")?;
    if fortran.trim() != "False" {
        return Err("Fortran-order arrays are not supported".into());
    }
    let shape = dict_value(&header, "shape").ok_or("header lacks `shape`")?;
    let dims = parse_shape(shape)?;
    let (rows, cols) = match dims.as_slice() {
        [r, c] => (*r, *c),
        other => return Err(format!("expected a 2-D array, found shape {other:?}")),
    };

    let count = rows * cols;
    let mut payload = vec![0u8; count * dtype.width()];
    reader
        .read_exact(&mut payload)
        .map_err(|e| format!("payload shorter than declared shape: {e}"))?;
    let data = match dtype {
        NpyDtype::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        NpyDtype::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect(),
    };
    Ok(NpyMatrix {
        rows,
        cols,
        dtype,
        data,
    })
}

/// Writes `data` (row-major, `rows * cols` values) as an npy v1.0 file.
///
/// With [`NpyDtype::F32`] the values are narrowed; callers are expected to pass
/// values that are representable.
pub fn write_matrix<W: Write>(
    writer: &mut W,
    rows: usize,
    cols: usize,
    data: &[f64],
    dtype: NpyDtype,
) -> std::io::Result<()> {
    assert_eq!(data.len(), rows * cols, "data length must match shape");
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({}, {}), }}",
        dtype.descr(),
        rows,
        cols
    );
    // magic(6) + version(2) + len(2) + dict + '\n' padded to a multiple of 64
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.push_str(&" ".repeat(pad));
    dict.push('\n');

    writer.write_all(MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(dict.len() as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * dtype.width());
    for &v in data {
        match dtype {
            NpyDtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            NpyDtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    writer.write_all(&buf)
}

/// Extracts the raw text of `key`'s value from a Python dict literal.
fn dict_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let pat_single = format!("'{key}'");
    let pat_double = format!("\"{key}\"");
    let at = header
        .find(&pat_single)
        .map(|p| p + pat_single.len())
        .or_else(|| header.find(&pat_double).map(|p| p + pat_double.len()))?;
    let rest = header[at..].trim_start().strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else {
        rest.find(',').or_else(|| rest.find('}'))?
    };
    Some(rest[..end].trim())
}

fn parse_shape(text: &str) -> Result<Vec<usize>, String> {
    let inner = text
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| format!("malformed shape {text}"))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format!("bad shape entry {s}")))
        .collect()
}
