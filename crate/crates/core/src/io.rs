//! Binary container formats: `WTNS` tensors and `WLBL` multi-hot labels.
//!
//! All integers and payload values are little-endian.
//!
//! ```text
//! WTNS: "WTNS" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim × u64 dims | payload
//! WLBL: "WLBL" | u8 version=1 | u64 count | u16 num_classes | count × ceil(C/8) bytes (LSB-first)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::LabelSet;
use crate::error::{Result, WchError};
use crate::tensor::{Real, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"WTNS";
pub const LABEL_MAGIC: &[u8; 4] = b"WLBL";
pub const FORMAT_VERSION: u8 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[cfg(not(feature = "f32"))]
const NATIVE_DTYPE: u8 = DTYPE_F64;
#[cfg(feature = "f32")]
const NATIVE_DTYPE: u8 = DTYPE_F32;

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(WchError::Magic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let version = read_u8(r)?;
    if version != FORMAT_VERSION {
        return Err(WchError::Format(format!(
            "{} version {version} is not supported",
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub(crate) fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(WchError::Format(format!("{} dimensions do not fit in u8", t.ndim())));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[FORMAT_VERSION, NATIVE_DTYPE, t.ndim() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.numel() * std::mem::size_of::<Real>());
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Read a tensor stored as either dtype, converting to [`Real`].
pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    expect_magic(r, TENSOR_MAGIC)?;
    let dtype = read_u8(r)?;
    let ndim = read_u8(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(usize::try_from(read_u64(r)?).map_err(|_| WchError::Format("dimension overflow".into()))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| WchError::Format("tensor too large".into()))?;
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(WchError::Format(format!("unknown dtype {other}"))),
    };
    let mut raw = vec![0u8; numel * width];
    r.read_exact(&mut raw)?;
    let data: Vec<Real> = if dtype == DTYPE_F32 {
        raw.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect()
    } else {
        raw.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect()
    };
    Tensor::new(&shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

pub fn write_labels(w: &mut impl Write, labels: &[LabelSet], num_classes: usize) -> Result<()> {
    let classes =
        u16::try_from(num_classes).map_err(|_| WchError::Format(format!("{num_classes} classes do not fit in u16")))?;
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&(labels.len() as u64).to_le_bytes())?;
    w.write_all(&classes.to_le_bytes())?;
    let row = num_classes.div_ceil(8);
    for set in labels {
        if set.num_classes() != num_classes {
            return Err(WchError::Format(format!(
                "label set has {} classes, file declares {num_classes}",
                set.num_classes()
            )));
        }
        let mut bytes = vec![0u8; row];
        for c in set.classes() {
            bytes[c / 8] |= 1 << (c % 8);
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

/// Returns the label sets and the declared class count.
pub fn read_labels(r: &mut impl Read) -> Result<(Vec<LabelSet>, usize)> {
    expect_magic(r, LABEL_MAGIC)?;
    let count = read_u64(r)? as usize;
    let num_classes = read_u16(r)? as usize;
    let row = num_classes.div_ceil(8);
    let mut bytes = vec![0u8; row];
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        r.read_exact(&mut bytes)?;
        let classes: Vec<usize> = (0..num_classes).filter(|&c| bytes[c / 8] >> (c % 8) & 1 == 1).collect();
        if (num_classes..row * 8).any(|c| bytes[c / 8] >> (c % 8) & 1 == 1) {
            return Err(WchError::Format("label padding bits must be zero".into()));
        }
        out.push(LabelSet::from_classes(num_classes, &classes)?);
    }
    Ok((out, num_classes))
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[LabelSet], num_classes: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_labels(&mut w, labels, num_classes)?;
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<(Vec<LabelSet>, usize)> {
    read_labels(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"WTNS");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], NATIVE_DTYPE);
        assert_eq!(buf[6], 2);
        assert_eq!(u64::from_le_bytes(buf[7..15].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[15..23].try_into().unwrap()), 1);
        assert_eq!(buf.len(), 23 + 2 * std::mem::size_of::<Real>());
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn reads_f32_payloads() {
        let mut buf = b"WTNS".to_vec();
        buf.extend_from_slice(&[1, 0, 1]);
        buf.extend_from_slice(&3u64.to_le_bytes());
        for v in [0.5f32, 1.0, -4.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let t = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(t.data(), &[0.5, 1.0, -4.0]);
    }

    #[test]
    fn wrong_magic_names_expected_magic() {
        let buf = b"WLBL\x01\x00".to_vec();
        match read_tensor(&mut buf.as_slice()) {
            Err(WchError::Magic { expected, found }) => {
                assert_eq!(expected, "WTNS");
                assert_eq!(found, "WLBL");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_bits_are_lsb_first() {
        let labels = vec![
            LabelSet::from_classes(10, &[0, 2, 9]).unwrap(),
            LabelSet::from_classes(10, &[1]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_labels(&mut buf, &labels, 10).unwrap();
        // header: 4 magic + 1 version + 8 count + 2 classes
        assert_eq!(&buf[15..17], &[0b0000_0101, 0b0000_0010]);
        assert_eq!(&buf[17..19], &[0b0000_0010, 0]);
        let (back, c) = read_labels(&mut buf.as_slice()).unwrap();
        assert_eq!(c, 10);
        assert_eq!(back, labels);
    }
}
