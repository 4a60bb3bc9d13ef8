//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KAGP" | u32 version | u32 record count
//! per record: u16 name length | name (UTF-8) | u8 rank | u32 dims[rank] | f64 values
//! u32 config length | config (UTF-8 JSON)
//! ```

use std::collections::HashMap;
use std::path::Path;

use super::config::RunConfig;
use super::train::AdamState;
use crate::error::{CheckpointError, Error, Result};
use crate::kahg::KahgParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KAGP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: KahgParams,
    pub adam: AdamState,
    /// Completed training epochs.
    pub epoch: usize,
    /// Mean training loss of each completed epoch.
    pub losses: Vec<f64>,
}

impl Checkpoint {
    /// Named tensors in file order.
    pub fn records(&self) -> Vec<(String, Tensor)> {
        let named = self.params.named();
        let mut out: Vec<(String, Tensor)> = named.iter().map(|(n, t)| (n.clone(), (*t).clone())).collect();
        for ((n, _), m) in named.iter().zip(&self.adam.m) {
            out.push((format!("adam.m.{n}"), m.clone()));
        }
        for ((n, _), v) in named.iter().zip(&self.adam.v) {
            out.push((format!("adam.v.{n}"), v.clone()));
        }
        out.push(("adam.step".into(), Tensor::scalar(self.adam.step as f64)));
        out.push(("epoch".into(), Tensor::scalar(self.epoch as f64)));
        out.push(("train.loss".into(), Tensor::from_vec(self.losses.clone())));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records = self.records();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in &records {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let config = serde_json::to_string(&self.config).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(config.as_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let count = r.u32()?;
        let mut records = HashMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product::<usize>();
            if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(CheckpointError::Truncated.into());
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("record {name}: {e}")))?;
            if records.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate record {name}")).into());
            }
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
        if r.remaining() != 0 {
            return Err(CheckpointError::Malformed("trailing bytes".into()).into());
        }
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;

        let mut take = |name: &str| records.remove(name).ok_or_else(|| CheckpointError::MissingField(name.into()));
        let params = KahgParams::from_named(config.dims, config.kernel_enabled, |n| take(n).ok())?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let mut moments = |prefix: &str| -> Result<Vec<Tensor>> {
            names
                .iter()
                .zip(params.named())
                .map(|(n, (_, p))| {
                    let t = take(&format!("{prefix}{n}"))?;
                    if t.shape() != p.shape() {
                        return Err(CheckpointError::Malformed(format!("{prefix}{n} shape {:?}", t.shape())).into());
                    }
                    Ok(t)
                })
                .collect()
        };
        let m = moments("adam.m.")?;
        let v = moments("adam.v.")?;
        let step = count_record(take("adam.step")?, "adam.step")?;
        let epoch = count_record(take("epoch")?, "epoch")? as usize;
        let losses = take("train.loss")?.into_data();
        Ok(Self { config, params, adam: AdamState { step, m, v }, epoch, losses })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn count_record(t: Tensor, name: &str) -> Result<u64> {
    let v = if t.numel() == 1 { t.item() } else { -1.0 };
    if v < 0.0 || v.fract() != 0.0 {
        return Err(CheckpointError::Malformed(format!("{name} must be a non-negative integer")).into());
    }
    Ok(v as u64)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint(CheckpointError::Truncated));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::initial_checkpoint;
    use crate::kahg::Dims;

    fn sample() -> Checkpoint {
        let cfg = RunConfig {
            dims: Dims { layers: 2, c_enc: 4, c_prime: 4, c_cls: 5, grid: 2, image: 8 },
            ..RunConfig::default()
        };
        let mut ckpt = initial_checkpoint(&cfg).unwrap();
        ckpt.adam.step = 7;
        ckpt.epoch = 3;
        ckpt.losses = vec![1.5, 0.25, f64::MIN_POSITIVE];
        for m in &mut ckpt.adam.m {
            *m = m.map(|_| 0.1 + 1e-17);
        }
        ckpt
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.adam, ckpt.adam);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.losses, ckpt.losses);
        for ((na, a), (nb, b)) in ckpt.params.named().into_iter().zip(back.params.named()) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b), "{na}");
        }
    }

    #[test]
    fn rejects_bad_headers() {
        let mut bytes = sample().to_bytes().unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Checkpoint(CheckpointError::BadMagic))));
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion(2)))
        ));
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample().to_bytes().unwrap();
        for len in (0..bytes.len()).step_by(7).chain([bytes.len() - 1]) {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..len]), Err(Error::Checkpoint(_))), "length {len}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn missing_record_is_named() {
        let ckpt = sample();
        let mut records = ckpt.records();
        records.retain(|(n, _)| n != "epoch");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in &records {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let config = serde_json::to_string(&ckpt.config).unwrap();
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(config.as_bytes());
        match Checkpoint::from_bytes(&buf) {
            Err(Error::Checkpoint(CheckpointError::MissingField(name))) => assert_eq!(name, "epoch"),
            other => panic!("expected missing field, got {other:?}"),
        }
    }
}
