//! IDX binary arrays of unsigned bytes (the MNIST file format).
//!
//! Layout: a big-endian `u32` magic `0x0000_08NN` where `NN` is the number
//! of dimensions, then one big-endian `u32` per dimension, then the payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC_IMAGES: u32 = 0x0000_0803;
pub const MAGIC_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if dims.is_empty() || dims.len() > 255 || expect != data.len() {
            return Err(Error::invalid(format!(
                "idx dims {dims:?} do not match payload of {} bytes",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }

    /// Elements per leading index (e.g. pixels per image).
    pub fn item_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn item(&self, i: usize) -> &[u8] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |offset: usize| -> Result<u32> {
            bytes
                .get(offset..offset + 4)
                .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| Error::Idx {
                    offset,
                    msg: format!("truncated header ({} bytes in file)", bytes.len()),
                })
        };
        let magic = word(0)?;
        if magic >> 8 != 0x08 || magic & 0xff == 0 {
            return Err(Error::Idx {
                offset: 0,
                msg: format!("bad magic 0x{magic:08x}, expected unsigned-byte type 0x08"),
            });
        }
        let ndim = (magic & 0xff) as usize;
        let dims = (0..ndim)
            .map(|k| word(4 + 4 * k).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let start = 4 + 4 * ndim;
        let len: usize = dims.iter().product();
        let payload = &bytes[start.min(bytes.len())..];
        if payload.len() != len {
            return Err(Error::Idx {
                offset: start + payload.len().min(len),
                msg: format!("payload has {} bytes, dims {dims:?} need {len}", payload.len()),
            });
        }
        Ok(Self {
            dims,
            data: payload.to_vec(),
        })
    }
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    IdxArray::from_bytes(&std::fs::read(path)?)
}

pub fn write_idx(path: &Path, arr: &IdxArray) -> Result<()> {
    std::fs::write(path, arr.to_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_image_file() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0x7f];
        let a = IdxArray::from_bytes(&bytes).unwrap();
        assert_eq!(a.magic(), MAGIC_IMAGES);
        assert_eq!(a.dims, vec![1, 1, 1]);
        assert_eq!(a.data, vec![127]);
        assert_eq!(a.to_bytes(), bytes);
    }

    #[test]
    fn labels_file() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 0, 1, 2];
        let a = IdxArray::from_bytes(&bytes).unwrap();
        assert_eq!(a.magic(), MAGIC_LABELS);
        assert_eq!(a.data, vec![0, 1, 2]);
    }

    #[test]
    fn errors_carry_offsets() {
        let err = IdxArray::from_bytes(&[0, 0, 9, 1, 0, 0, 0, 1, 5]).unwrap_err().to_string();
        assert!(err.contains("bad magic") && err.contains("offset 0"), "{err}");
        let err = IdxArray::from_bytes(&[0, 0, 8, 3, 0, 0, 0, 2]).unwrap_err().to_string();
        assert!(err.contains("offset 8"), "{err}");
        let err = IdxArray::from_bytes(&[0, 0, 8, 1, 0, 0, 0, 3, 1]).unwrap_err().to_string();
        assert!(err.contains("payload has 1 bytes") && err.contains("offset 9"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.idx");
        let a = IdxArray::new(vec![2, 3, 2], (0..12).collect()).unwrap();
        write_idx(&p, &a).unwrap();
        assert_eq!(read_idx(&p).unwrap(), a);
        assert_eq!(a.item(1), &[6, 7, 8, 9, 10, 11]);
        assert!(IdxArray::new(vec![2, 2], vec![0; 3]).is_err());
    }
}
