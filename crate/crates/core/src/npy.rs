//! Minimal reader/writer for the NumPy `.npy` format.
//!
//! Supports C-order arrays of `f4` and `u2` in either byte order, which is all
//! a task export needs. Files are written as version 1.0, little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U16,
}

impl Dtype {
    fn code(self) -> &'static str {
        match self {
            Dtype::F32 => "f4",
            Dtype::U16 => "u2",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub little_endian: bool,
    pub shape: Vec<usize>,
}

impl Header {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Parses the header dictionary, e.g.
/// `{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }`.
fn parse_dict(text: &str) -> Result<Header> {
    let text = text.trim();
    let body = text
        .strip_prefix('{')
        .and_then(|t| t.trim_end().strip_suffix('}'))
        .ok_or_else(|| format_err("npy header is not a dict literal"))?;

    let descr = dict_value(body, "descr")?;
    let descr = descr
        .trim()
        .trim_matches(|c| c == '\'' || c == '"')
        .to_string();
    let (endian, code) = descr.split_at(1);
    let little_endian = match endian {
        "<" => true,
        ">" => false,
        "|" | "=" => cfg!(target_endian = "little"),
        _ => return Err(format_err(format!("unsupported npy descr {descr:?}"))),
    };
    let dtype = match code {
        "f4" => Dtype::F32,
        "u2" => Dtype::U16,
        _ => return Err(format_err(format!("unsupported npy dtype {descr:?}"))),
    };

    let fortran = dict_value(body, "fortran_order")?;
    match fortran.trim() {
        "False" => {}
        "True" => return Err(format_err("fortran-order npy arrays are not supported")),
        other => return Err(format_err(format!("bad fortran_order value {other:?}"))),
    }

    let shape_text = dict_value(body, "shape")?;
    let inner = shape_text
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| format_err("npy shape is not a tuple"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| format_err(format!("bad npy shape entry {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Header {
        dtype,
        little_endian,
        shape,
    })
}

/// Raw text of the value stored under `key`; stops at the next top-level comma.
fn dict_value<'a>(body: &'a str, key: &str) -> Result<&'a str> {
    let quoted = [format!("'{key}'"), format!("\"{key}\"")];
    let start = quoted
        .iter()
        .find_map(|k| body.find(k.as_str()).map(|p| p + k.len()))
        .ok_or_else(|| format_err(format!("npy header lacks key {key:?}")))?;
    let rest = body[start..]
        .trim_start()
        .strip_prefix(':')
        .ok_or_else(|| format_err(format!("npy header key {key:?} has no value")))?;
    let mut depth = 0i32;
    for (i, ch) in rest.char_indices() {
        match ch {
            '(' | '[' => depth += 1,
            ')' | ']' => depth -= 1,
            ',' if depth == 0 => return Ok(&rest[..i]),
            _ => {}
        }
    }
    Ok(rest)
}

pub fn read_header<R: Read>(reader: &mut R) -> Result<Header> {
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|_| format_err("npy file too short for magic"))?;
    if &magic[..6] != MAGIC {
        return Err(format_err("bad npy magic"));
    }
    let header_len = match magic[6] {
        1 => {
            let mut len = [0u8; 2];
            reader
                .read_exact(&mut len)
                .map_err(|_| format_err("truncated npy header"))?;
            u16::from_le_bytes(len) as usize
        }
        2 | 3 => {
            let mut len = [0u8; 4];
            reader
                .read_exact(&mut len)
                .map_err(|_| format_err("truncated npy header"))?;
            u32::from_le_bytes(len) as usize
        }
        v => return Err(format_err(format!("unsupported npy version {v}"))),
    };
    let mut text = vec![0u8; header_len];
    reader
        .read_exact(&mut text)
        .map_err(|_| format_err("truncated npy header"))?;
    let text = std::str::from_utf8(&text).map_err(|_| format_err("npy header is not text"))?;
    parse_dict(text)
}

fn read_payload<R: Read>(reader: &mut R, header: &Header, expected: Dtype) -> Result<Vec<u8>> {
    if header.dtype != expected {
        return Err(format_err(format!(
            "expected npy dtype {}, found {}",
            expected.code(),
            header.dtype.code()
        )));
    }
    let mut bytes = vec![0u8; header.element_count() * expected.size()];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| format_err("npy payload shorter than its shape"))?;
    let mut extra = [0u8; 1];
    if reader
        .read(&mut extra)
        .map_err(|e| format_err(e.to_string()))?
        != 0
    {
        return Err(format_err("npy payload longer than its shape"));
    }
    Ok(bytes)
}

pub fn read_f32<R: Read>(reader: &mut R) -> Result<(Vec<usize>, Vec<f32>)> {
    let header = read_header(reader)?;
    let bytes = read_payload(reader, &header, Dtype::F32)?;
    let values = bytes
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if header.little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    Ok((header.shape, values))
}

pub fn read_u16<R: Read>(reader: &mut R) -> Result<(Vec<usize>, Vec<u16>)> {
    let header = read_header(reader)?;
    let bytes = read_payload(reader, &header, Dtype::U16)?;
    let values = bytes
        .chunks_exact(2)
        .map(|b| {
            let b = [b[0], b[1]];
            if header.little_endian {
                u16::from_le_bytes(b)
            } else {
                u16::from_be_bytes(b)
            }
        })
        .collect();
    Ok((header.shape, values))
}

fn write_header<W: Write>(writer: &mut W, code: &str, shape: &[usize]) -> std::io::Result<()> {
    let shape_text = match shape {
        [one] => format!("({one},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict = format!(
        "{{'descr': '<{}', 'fortran_order': False, 'shape': {}, }}",
        code, shape_text
    );
    // magic(6) + version(2) + len(2) + dict + '\n' padded to a multiple of 64
    let unpadded = 10 + dict.len() + 1;
    dict.extend(std::iter::repeat_n(' ', (64 - unpadded % 64) % 64));
    dict.push('\n');
    writer.write_all(MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(dict.len() as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())
}

pub fn write_f32<W: Write>(writer: &mut W, shape: &[usize], values: &[f32]) -> std::io::Result<()> {
    write_header(writer, Dtype::F32.code(), shape)?;
    for v in values {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_u16<W: Write>(writer: &mut W, shape: &[usize], values: &[u16]) -> std::io::Result<()> {
    write_header(writer, Dtype::U16.code(), shape)?;
    for v in values {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes `f8`, used only for diagnostic dumps; the reader does not accept it.
pub fn write_f64<W: Write>(writer: &mut W, shape: &[usize], values: &[f64]) -> std::io::Result<()> {
    write_header(writer, "f8", shape)?;
    for v in values {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}
