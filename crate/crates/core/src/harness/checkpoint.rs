//! Versioned little-endian binary container for a trained model.
//!
//! Layout: magic, `u32` version, `u64`-prefixed JSON header (config, RNG
//! state, optimizer step, epoch), `u64` parameter count, then per parameter
//! its name, trainable flag, shape, and value / first moment / second moment
//! as raw `f64` bits.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::Model;
use crate::autodiff::{Param, ParamStore, RngState, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MGVMOECK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub rng: RngState,
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    rng: RngState,
    step: u64,
    epoch: usize,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    for x in t.data() {
        buf.extend_from_slice(&x.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(b))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        Tensor::new([rows, cols], data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.model.config.clone(),
            rng: self.rng,
            step: self.model.store.step,
            epoch: self.epoch,
        })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_u64(&mut buf, header.len() as u64);
        buf.extend_from_slice(&header);
        put_u64(&mut buf, self.model.store.len() as u64);
        for (_, p) in self.model.store.iter() {
            put_u64(&mut buf, p.name.len() as u64);
            buf.extend_from_slice(p.name.as_bytes());
            buf.push(u8::from(p.trainable));
            put_u64(&mut buf, p.value.rows() as u64);
            put_u64(&mut buf, p.value.cols() as u64);
            put_tensor(&mut buf, &p.value);
            put_tensor(&mut buf, &p.m);
            put_tensor(&mut buf, &p.v);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut v = [0u8; 4];
        v.copy_from_slice(r.take(4)?);
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = r.len()?;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;
        let count = r.len()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.len()?;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Checkpoint(format!("bad trainable flag {b}"))),
            };
            let rows = r.len()?;
            let cols = r.len()?;
            let value = r.tensor(rows, cols)?;
            let m = r.tensor(rows, cols)?;
            let v = r.tensor(rows, cols)?;
            store.push_raw(Param {
                name,
                grad: Tensor::zeros(rows, cols),
                value,
                m,
                v,
                trainable,
            })?;
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        store.step = header.step;
        Ok(Self {
            model: Model::from_store(&header.config, store)?,
            rng: header.rng,
            epoch: header.epoch,
        })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Rng;

    fn model() -> Model {
        let cfg = TrainConfig {
            d: 4,
            h: 3,
            experts: 2,
            ..TrainConfig::default()
        };
        let lex: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 * 0.1, -0.5]).collect();
        Model::init(&cfg, 12, Some(&lex), 3, 5, &mut Rng::new(4)).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let mut m = model();
        m.store.step = 17;
        let id = m.vmoe.as_ref().unwrap().router.w;
        m.store.get_mut(id).value.data_mut()[0] = f64::from_bits(0x3ff0_0000_0000_0001);
        m.store.get_mut(id).m.data_mut()[1] = -1e-300;
        let ck = Checkpoint {
            model: m,
            rng: Rng::new(9).fork(2).state(),
            epoch: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in ck.model.store.iter().zip(back.model.store.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert!(!dir.path().join("model.ckpt.tmp").exists());
    }

    #[test]
    fn corrupt_input_rejected() {
        let ck = Checkpoint {
            model: model(),
            rng: Rng::new(0).state(),
            epoch: 0,
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
