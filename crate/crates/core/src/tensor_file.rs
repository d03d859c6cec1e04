//! `PTF1` tensor files.
//!
//! Layout: the 4-byte magic `PTF1`, then C, H, W as little-endian `u32`,
//! then C·H·W little-endian `f32` values in c-major, row, column order.
//! A file may hold several records back to back; readers consume records
//! until end of input.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PTF1";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let len = dims.iter().product::<usize>();
        if len != data.len() {
            return Err(Error::shape(format!(
                "tensor dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }
}

pub fn write_record<W: Write>(w: &mut W, dims: [usize; 3], data: &[f32]) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::shape(format!(
            "tensor dims {dims:?} do not match {} values",
            data.len()
        )));
    }
    w.write_all(MAGIC)?;
    for d in dims {
        let d =
            u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one record, or `None` at a clean end of input.
pub fn read_record<R: Read>(r: &mut R) -> Result<Option<TensorRecord>> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format("truncated tensor header".into()))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let len = dims.iter().product::<usize>();
    let mut raw = vec![0u8; len * 4];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format(format!("truncated tensor payload, expected {len} values")))?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some(TensorRecord { dims, data }))
}

pub fn save_records(path: &Path, records: &[TensorRecord]) -> Result<()> {
    let file = File::create(path).map_err(Error::file(path))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        write_record(&mut w, rec.dims, &rec.data)?;
    }
    w.flush().map_err(Error::file(path))?;
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<TensorRecord>> {
    let file = File::open(path).map_err(Error::file(path))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(rec) = read_record(&mut r)? {
        out.push(rec);
    }
    Ok(out)
}
