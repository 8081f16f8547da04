//! Sectioned binary container for named tensors.
//!
//! Layout: magic, a free-form header blob, then sections. Each section is a
//! name plus a list of tensors; each tensor is written as a length-prefixed
//! UTF-8 name, a dtype tag, the rank, little-endian 64-bit dims, and the raw
//! little-endian payload. Writing what was read reproduces the file byte for
//! byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dtype, Element};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GOPTC001";

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl RawTensor {
    pub fn from_slice<E: Element>(name: impl Into<String>, shape: &[usize], data: &[E]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut payload = Vec::with_capacity(data.len() * E::DTYPE.byte_width());
        for &v in data {
            v.write_le(&mut payload);
        }
        RawTensor {
            name: name.into(),
            dtype: E::DTYPE,
            shape: shape.to_vec(),
            payload,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decodes the payload; the stored dtype must match `E` exactly so a
    /// round trip can never silently lose bits.
    pub fn to_vec<E: Element>(&self) -> Result<Vec<E>> {
        if self.dtype != E::DTYPE {
            return Err(Error::Validation(format!(
                "tensor '{}' stored as {:?}, requested {:?}",
                self.name,
                self.dtype,
                E::DTYPE
            )));
        }
        let w = self.dtype.byte_width();
        Ok(self.payload.chunks_exact(w).map(E::read_le).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    /// Opaque application header (config fingerprints, counters, ...).
    pub header: Vec<u8>,
    pub sections: Vec<(String, Vec<RawTensor>)>,
}

fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let b = read_exact(r, 2)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let b = read_exact(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::Validation(format!("name too long: {name}")));
    }
    write_u16(w, bytes.len() as u16)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let len = read_u16(r)? as usize;
    let bytes = read_exact(r, len)?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(format!("bad utf-8 in tensor name: {e}")))
}

impl Container {
    pub fn section(&self, name: &str) -> Option<&[RawTensor]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u64(w, self.header.len() as u64)?;
        w.write_all(&self.header)?;
        write_u64(w, self.sections.len() as u64)?;
        for (name, tensors) in &self.sections {
            write_name(w, name)?;
            write_u64(w, tensors.len() as u64)?;
            for t in tensors {
                write_name(w, &t.name)?;
                w.write_all(&[t.dtype.tag(), t.shape.len() as u8])?;
                for &d in &t.shape {
                    write_u64(w, d as u64)?;
                }
                let expect = t.numel() * t.dtype.byte_width();
                if t.payload.len() != expect {
                    return Err(Error::Validation(format!(
                        "tensor '{}' payload {} bytes, shape implies {}",
                        t.name,
                        t.payload.len(),
                        expect
                    )));
                }
                w.write_all(&t.payload)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic = read_exact(r, 8)?;
        if magic != MAGIC {
            return Err(Error::Parse("bad magic: not a tensor container".into()));
        }
        let header_len = read_u64(r)? as usize;
        let header = read_exact(r, header_len)?;
        let n_sections = read_u64(r)? as usize;
        let mut sections = Vec::with_capacity(n_sections);
        for _ in 0..n_sections {
            let sec_name = read_name(r)?;
            let n_tensors = read_u64(r)? as usize;
            let mut tensors = Vec::with_capacity(n_tensors);
            for _ in 0..n_tensors {
                let name = read_name(r)?;
                let tags = read_exact(r, 2)?;
                let dtype = Dtype::from_tag(tags[0])
                    .ok_or_else(|| Error::Parse(format!("unknown dtype tag {}", tags[0])))?;
                let rank = tags[1] as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(read_u64(r)? as usize);
                }
                let numel: usize = shape.iter().product();
                let payload = read_exact(r, numel * dtype.byte_width())?;
                tensors.push(RawTensor {
                    name,
                    dtype,
                    shape,
                    payload,
                });
            }
            sections.push((sec_name, tensors));
        }
        Ok(Container { header, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t1 = RawTensor::from_slice::<f32>("a.weight", &[2, 3], &[1.0, -2.5, 3.25, 0.0, 7.5, -0.125]);
        let t2 = RawTensor::from_slice::<f64>("b.bias", &[4], &[0.1, 0.2, 0.3, 0.4]);
        let c = Container {
            header: b"hdr-bytes".to_vec(),
            sections: vec![
                ("params".into(), vec![t1, t2]),
                ("meta".into(), vec![]),
            ],
        };
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let c2 = Container::read_from(&mut buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        c2.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(c, c2);
    }

    #[test]
    fn dtype_mismatch_is_an_error() {
        let t = RawTensor::from_slice::<f32>("x", &[2], &[1.0, 2.0]);
        assert!(t.to_vec::<f64>().is_err());
        assert_eq!(t.to_vec::<f32>().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOTMAGIC\x00\x00\x00\x00\x00\x00\x00\x00";
        assert!(Container::read_from(&mut &bytes[..]).is_err());
    }
}
