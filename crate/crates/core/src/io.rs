//! Little-endian binary dumps.
//!
//! * Tensor: `"OCLT"`, `u32` rank, `u32` dims…, row-major `f64` payload.
//! * Grid: `"OCGR"`, `u8` kind (0 = class ids, 1 = `f64` channels), `u32`
//!   rank, `u32` dims…, then `u8` ids (empty = 255) or `f64` values. Flow
//!   grids carry their two channels as the last dimension.
//! * Transfer matrix: `"OCMT"`, `u64` triplet count, then `(u64 row, u64
//!   col, f64 weight)` records sorted by `(row, col)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numgrad::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"OCLT";
pub const GRID_MAGIC: &[u8; 4] = b"OCGR";
pub const MATRIX_MAGIC: &[u8; 4] = b"OCMT";

/// Class id reserved for unoccupied voxels and sky pixels.
pub const EMPTY: u8 = 255;

const GRID_LABELS: u8 = 0;
const GRID_VALUES: u8 = 1;

/// Payload of a grid dump.
#[derive(Clone, Debug, PartialEq)]
pub enum GridPayload {
    Labels(Vec<u8>),
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridDump {
    pub dims: Vec<usize>,
    pub payload: GridPayload,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) -> Result<()> {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

fn checked_numel(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    put_dims(&mut out, t.shape())?;
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf, pos: 0 };
    r.magic(TENSOR_MAGIC)?;
    let dims = r.dims()?;
    let n = checked_numel(&dims)?;
    if n.saturating_mul(8) > buf.len() {
        return Err(Error::Format("payload shorter than header claims".into()));
    }
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Tensor::new(dims, data)
}

pub fn encode_grid(g: &GridDump) -> Result<Vec<u8>> {
    let n = checked_numel(&g.dims)?;
    let mut out = Vec::new();
    out.extend_from_slice(GRID_MAGIC);
    match &g.payload {
        GridPayload::Labels(ids) => {
            if ids.len() != n {
                return Err(Error::shape("grid dump", "label count does not match dims"));
            }
            out.push(GRID_LABELS);
            put_dims(&mut out, &g.dims)?;
            out.extend_from_slice(ids);
        }
        GridPayload::Values(vals) => {
            if vals.len() != n {
                return Err(Error::shape("grid dump", "value count does not match dims"));
            }
            out.push(GRID_VALUES);
            put_dims(&mut out, &g.dims)?;
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_grid(buf: &[u8]) -> Result<GridDump> {
    let mut r = Reader { buf, pos: 0 };
    r.magic(GRID_MAGIC)?;
    let kind = r.u8()?;
    let dims = r.dims()?;
    let n = checked_numel(&dims)?;
    if n > buf.len() {
        return Err(Error::Format("payload shorter than header claims".into()));
    }
    let payload = match kind {
        GRID_LABELS => GridPayload::Labels(r.take(n)?.to_vec()),
        GRID_VALUES => {
            let vals = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("grid dump values".into()));
            }
            GridPayload::Values(vals)
        }
        other => return Err(Error::Format(format!("unknown grid kind {other}"))),
    };
    r.finish()?;
    Ok(GridDump { dims, payload })
}

/// `(row, col, weight)` triplets.
pub fn encode_triplets(triplets: &[(usize, usize, f64)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 24 * triplets.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(triplets.len() as u64).to_le_bytes());
    for &(r, c, w) in triplets {
        out.extend_from_slice(&(r as u64).to_le_bytes());
        out.extend_from_slice(&(c as u64).to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn decode_triplets(buf: &[u8]) -> Result<Vec<(usize, usize, f64)>> {
    let mut r = Reader { buf, pos: 0 };
    r.magic(MATRIX_MAGIC)?;
    let n = r.u64()? as usize;
    if n.saturating_mul(24) > buf.len() {
        return Err(Error::Format("payload shorter than header claims".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let row = r.u64()? as usize;
        let col = r.u64()? as usize;
        let w = r.f64()?;
        out.push((row, col, w));
    }
    r.finish()?;
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_tensor(t)?)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_file(path)?)
}

pub fn save_grid(path: &Path, g: &GridDump) -> Result<()> {
    write_file(path, &encode_grid(g)?)
}

pub fn load_grid(path: &Path) -> Result<GridDump> {
    decode_grid(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert_eq!(&b[..4], b"OCLT");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..24], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let t = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert!(matches!(decode_tensor(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
        assert!(decode_grid(&b).is_err());
    }

    #[test]
    fn grid_labels_keep_empty_marker() {
        let g = GridDump {
            dims: vec![1, 2, 2],
            payload: GridPayload::Labels(vec![0, EMPTY, 3, EMPTY]),
        };
        let b = encode_grid(&g).unwrap();
        assert_eq!(b[4], 0);
        assert_eq!(decode_grid(&b).unwrap(), g);
    }

    proptest! {
        #[test]
        fn tensor_round_trip(dims in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) as f64).sin() * 1e3).collect();
            let t = Tensor::new(dims, data).unwrap();
            prop_assert_eq!(decode_tensor(&encode_tensor(&t).unwrap()).unwrap(), t);
        }

        #[test]
        fn triplet_round_trip(raw in proptest::collection::vec((0usize..1000, 0usize..1000, -1e6f64..1e6), 0..50)) {
            prop_assert_eq!(decode_triplets(&encode_triplets(&raw)).unwrap(), raw);
        }
    }
}
