//! Versioned binary weight container.
//!
//! Layout (little-endian): magic `HDSW`, `u32` version, `u32` fingerprint
//! length + fingerprint bytes, `u32` record count, then per record:
//! `u32` name length, name bytes, `u8` dtype tag, `u32` rank, `u64` dims,
//! raw values.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::UResNet;
use crate::error::{Error, Result};
use crate::real::{DType, Real};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HDSW";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl WeightRecord {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        Self::from_values(name, t.shape(), &t.data())
    }

    pub fn from_values<T: Real>(name: &str, shape: &[usize], values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.byte_width());
        for &v in values {
            v.write_le(&mut bytes);
        }
        Self { name: name.to_string(), dtype: T::DTYPE, shape: shape.to_vec(), bytes }
    }

    /// Decodes into `T`, converting between precisions when needed.
    pub fn values<T: Real>(&self) -> Vec<T> {
        match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
                .collect(),
            DType::F64 => {
                self.bytes.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect()
            }
        }
    }
}

pub fn write_weight_file(path: &Path, fingerprint: &str, records: &[WeightRecord]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(fingerprint.len() as u32).to_le_bytes());
    buf.extend_from_slice(fingerprint.as_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.push(r.dtype.tag());
        buf.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&r.bytes);
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}

/// Returns `(fingerprint, records)`.
pub fn read_weight_file(path: &Path) -> Result<(String, Vec<WeightRecord>)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let fingerprint = r.string()?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n * dtype.byte_width())?.to_vec();
        records.push(WeightRecord { name, dtype, shape, bytes });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((fingerprint, records))
}

pub fn save_weights<T: Real>(model: &UResNet<T>, path: &Path) -> Result<()> {
    let records: Vec<WeightRecord> =
        model.parameters().iter().map(|p| WeightRecord::from_tensor(&p.name, &p.tensor)).collect();
    write_weight_file(path, &model.config().fingerprint(), &records)
}

/// Loads parameters saved by [`save_weights`]. The model is left untouched
/// unless every record matches by name and shape.
pub fn load_weights<T: Real>(model: &UResNet<T>, path: &Path) -> Result<()> {
    let (fingerprint, records) = read_weight_file(path)?;
    let expected = model.config().fingerprint();
    if fingerprint != expected {
        return Err(Error::Fingerprint { expected, found: fingerprint });
    }
    let params = model.parameters();
    if records.len() != params.len() {
        return Err(Error::Format(format!("{} records for {} parameters", records.len(), params.len())));
    }
    for (p, r) in params.iter().zip(&records) {
        if p.name != r.name || p.tensor.shape() != r.shape.as_slice() {
            return Err(Error::Format(format!(
                "record {} {:?} does not match parameter {} {:?}",
                r.name,
                r.shape,
                p.name,
                p.tensor.shape()
            )));
        }
    }
    for (p, r) in params.iter().zip(&records) {
        *p.tensor.data_mut() = r.values();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchConfig};
    use crate::rng::RngState;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hdsw");
        let a: UResNet<f32> = build_model(&ArchConfig::tiny(), &mut RngState::new(1)).unwrap();
        save_weights(&a, &path).unwrap();
        let b: UResNet<f32> = build_model(&ArchConfig::tiny(), &mut RngState::new(2)).unwrap();
        load_weights(&b, &path).unwrap();
        for (pa, pb) in a.parameters().iter().zip(b.parameters()) {
            let (va, vb) = (pa.tensor.to_vec(), pb.tensor.to_vec());
            assert!(va.iter().zip(&vb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn wrong_architecture_is_rejected_and_model_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hdsw");
        let a: UResNet<f64> = build_model(&ArchConfig::tiny(), &mut RngState::new(1)).unwrap();
        save_weights(&a, &path).unwrap();
        let other = ArchConfig { scales: 3, encoder_blocks: vec![1; 3], decoder_blocks: vec![1; 2], supervision_levels: vec![0, 1, 2], ..ArchConfig::tiny() };
        let b: UResNet<f64> = build_model(&other, &mut RngState::new(2)).unwrap();
        let before: Vec<Vec<f64>> = b.parameters().iter().map(|p| p.tensor.to_vec()).collect();
        let err = load_weights(&b, &path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&a.config().fingerprint()) && msg.contains(&other.fingerprint()), "{msg}");
        let after: Vec<Vec<f64>> = b.parameters().iter().map(|p| p.tensor.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hdsw");
        let a: UResNet<f64> = build_model(&ArchConfig::tiny(), &mut RngState::new(1)).unwrap();
        save_weights(&a, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_weight_file(&path), Err(Error::Format(_))));
    }
}
