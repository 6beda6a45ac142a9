//! Flat little-endian container of named `f64` arrays.
//!
//! ```text
//! magic   b"VLKT"
//! version u32            (currently 1)
//! count   u32
//! count x {
//!     name_len u32, name utf-8 bytes,
//!     rank u32, dims u64 x rank,
//!     payload f64 x prod(dims)
//! }
//! ```
//! Snapshots store their batch size and loss as rank-0 entries under the
//! reserved `meta.` prefix.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::config::ModelConfig;
use super::params::ModelParams;
use super::snapshot::GradientSnapshot;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VLKT";
pub const VERSION: u32 = 1;
const META_BATCH: &str = "meta.batch_size";
const META_LOSS: &str = "meta.loss";
const MAX_NAME: usize = 1 << 16;

pub fn write_arrays<S: Scalar, W: Write>(mut w: W, arrays: &[(&str, &Tensor<S>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated container".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_arrays<S: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<S>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > MAX_NAME {
            return Err(Error::Format(format!("name length {len} too large")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n.min(1 << 20));
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b).map_err(truncated)?;
            data.push(S::lit(f64::from_le_bytes(b)));
        }
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

pub fn write_params<S: Scalar, W: Write>(w: W, params: &ModelParams<S>) -> Result<()> {
    let arrays: Vec<(&str, &Tensor<S>)> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_arrays(w, &arrays)
}

pub fn read_params<S: Scalar, R: Read>(r: R, cfg: &ModelConfig) -> Result<ModelParams<S>> {
    let map: BTreeMap<String, Tensor<S>> = read_arrays(r)?.into_iter().collect();
    ModelParams::from_tensors(cfg, map)
}

pub fn write_snapshot<S: Scalar, W: Write>(w: W, snap: &GradientSnapshot<S>) -> Result<()> {
    let batch = Tensor::scalar(S::lit(snap.batch_size as f64));
    let loss = Tensor::scalar(snap.loss);
    let mut arrays: Vec<(&str, &Tensor<S>)> = vec![(META_BATCH, &batch), (META_LOSS, &loss)];
    arrays.extend(snap.iter().map(|(n, t)| (n.as_str(), t)));
    write_arrays(w, &arrays)
}

pub fn read_snapshot<S: Scalar, R: Read>(r: R) -> Result<GradientSnapshot<S>> {
    let mut grads = BTreeMap::new();
    let mut batch = None;
    let mut loss = None;
    for (name, t) in read_arrays::<S, R>(r)? {
        match name.as_str() {
            META_BATCH => batch = Some(t.item()),
            META_LOSS => loss = Some(t.item()),
            _ => {
                if grads.insert(name.clone(), t).is_some() {
                    return Err(Error::Format(format!("duplicate entry {name}")));
                }
            }
        }
    }
    let batch = batch.ok_or_else(|| Error::Format("missing batch size".into()))?;
    let loss = loss.ok_or_else(|| Error::Format("missing loss".into()))?;
    let batch = batch
        .to_usize()
        .ok_or_else(|| Error::Format("invalid batch size".into()))?;
    Ok(GradientSnapshot::new(grads, batch, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ArchVariant;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn arrays_roundtrip_bit_exact(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40), cols in 1usize..4) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let t = Tensor::new(vec![rows, cols], values[..rows * cols].to_vec()).unwrap();
            let s = Tensor::scalar(values[0]);
            let mut buf = Vec::new();
            write_arrays(&mut buf, &[("a.b", &t), ("scalar", &s)]).unwrap();
            let back = read_arrays::<f64, _>(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, "a.b");
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back[0].1), bits(&t));
            prop_assert_eq!(back[0].1.shape(), t.shape());
            prop_assert_eq!(back[1].1.shape(), &[] as &[usize]);
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::from_rows(&[vec![1.5f64]]);
        let mut buf = Vec::new();
        write_arrays(&mut buf, &[("w", &t)]).unwrap();
        let mut expected = b"VLKT".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend(2u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1.5f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn params_roundtrip() {
        let cfg = ModelConfig::new(ArchVariant::B, (4, 4, 1), (2, 2), 4, 2, 1, 3);
        let p = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert_eq!(read_params::<f64, _>(buf.as_slice(), &cfg).unwrap(), p);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::from_rows(&[vec![1.0f64, 2.0]]);
        let mut buf = Vec::new();
        write_arrays(&mut buf, &[("w", &t)]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_arrays::<f64, _>(bad.as_slice()), Err(Error::Format(_))));
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_arrays::<f64, _>(buf.as_slice()), Err(Error::Format(_))));
    }
}
