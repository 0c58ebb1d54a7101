//! Minimal NPY v1.0 reader/writer.
//!
//! Supported dtypes: little-endian f4/f8 for reflectance data and
//! i1/i2/i4/i8/u1/u2/u4 for ground-truth rasters. Arrays are read into
//! f32 or i64 buffers. Fortran-ordered files are rejected.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

pub enum NpyData {
    F32(Vec<f32>),
    I64(Vec<i64>),
}

fn npy_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Npy {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_header(path: &Path, header: &str) -> Result<(String, bool, Vec<usize>)> {
    // Header is a python dict literal:
    // {'descr': '<f4', 'fortran_order': False, 'shape': (610, 340, 103), }
    let descr = header
        .split("'descr':")
        .nth(1)
        .and_then(|s| s.split('\'').nth(1))
        .ok_or_else(|| npy_err(path, "missing descr"))?
        .to_string();
    let fortran = header
        .split("'fortran_order':")
        .nth(1)
        .map(|s| s.trim_start().starts_with("True"))
        .ok_or_else(|| npy_err(path, "missing fortran_order"))?;
    let shape_str = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| npy_err(path, "missing shape"))?;
    let mut shape = Vec::new();
    for part in shape_str.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        shape.push(
            part.parse::<usize>()
                .map_err(|_| npy_err(path, format!("bad shape token {part:?}")))?,
        );
    }
    Ok((descr, fortran, shape))
}

pub fn read(path: &Path) -> Result<NpyArray> {
    if !path.exists() {
        return Err(Error::DataNotFound(path.to_path_buf()));
    }
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| npy_err(path, "truncated magic"))?;
    if &magic[..6] != MAGIC {
        return Err(npy_err(path, "bad magic"));
    }
    if magic[6] != 1 {
        return Err(npy_err(path, format!("unsupported version {}.{}", magic[6], magic[7])));
    }
    let mut len_buf = [0u8; 2];
    file.read_exact(&mut len_buf)
        .map_err(|_| npy_err(path, "truncated header length"))?;
    let header_len = u16::from_le_bytes(len_buf) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)
        .map_err(|_| npy_err(path, "truncated header"))?;
    let header = String::from_utf8_lossy(&header).to_string();
    let (descr, fortran, shape) = parse_header(path, &header)?;
    if fortran {
        return Err(npy_err(path, "fortran_order arrays are not supported"));
    }
    let count: usize = shape.iter().product();
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;

    let elem = |size: usize| -> Result<()> {
        if raw.len() < count * size {
            Err(npy_err(
                path,
                format!("payload too short: need {} bytes, have {}", count * size, raw.len()),
            ))
        } else {
            Ok(())
        }
    };

    let data = match descr.as_str() {
        "<f4" => {
            elem(4)?;
            NpyData::F32(
                raw.chunks_exact(4)
                    .take(count)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        "<f8" => {
            elem(8)?;
            NpyData::F32(
                raw.chunks_exact(8)
                    .take(count)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32
                    })
                    .collect(),
            )
        }
        "|i1" | "<i1" => {
            elem(1)?;
            NpyData::I64(raw.iter().take(count).map(|&b| b as i8 as i64).collect())
        }
        "|u1" | "<u1" => {
            elem(1)?;
            NpyData::I64(raw.iter().take(count).map(|&b| b as i64).collect())
        }
        "<i2" => {
            elem(2)?;
            NpyData::I64(
                raw.chunks_exact(2)
                    .take(count)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as i64)
                    .collect(),
            )
        }
        "<u2" => {
            elem(2)?;
            NpyData::I64(
                raw.chunks_exact(2)
                    .take(count)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]) as i64)
                    .collect(),
            )
        }
        "<i4" => {
            elem(4)?;
            NpyData::I64(
                raw.chunks_exact(4)
                    .take(count)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64)
                    .collect(),
            )
        }
        "<u4" => {
            elem(4)?;
            NpyData::I64(
                raw.chunks_exact(4)
                    .take(count)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64)
                    .collect(),
            )
        }
        "<i8" => {
            elem(8)?;
            NpyData::I64(
                raw.chunks_exact(8)
                    .take(count)
                    .map(|c| i64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                    .collect(),
            )
        }
        other => return Err(npy_err(path, format!("unsupported dtype {other:?}"))),
    };
    Ok(NpyArray { shape, data })
}

fn write_header(out: &mut impl Write, descr: &str, shape: &[usize]) -> Result<()> {
    let shape_str = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_str}, }}"
    );
    // Pad with spaces so magic + 2-byte length + header is a multiple of 64,
    // terminated by a newline.
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');
    out.write_all(MAGIC)?;
    out.write_all(&[1u8, 0u8])?;
    out.write_all(&(header.len() as u16).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    Ok(())
}

pub fn write_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut out, "<f4", shape)?;
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_i32(path: &Path, shape: &[usize], data: &[i32]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut out, "<i4", shape)?;
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}
